"""Corpus pipeline: sensor-table transformation, tokenization into shards,
ratio-based mixing of tokenized sources, and train/validation splitting."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .seeding import derive_rng, unit_fraction
from .shards import (
    DEFAULT_SHARD_SIZE,
    ShardWriter,
    TokenShard,
    iter_documents,
    shard_paths,
)
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

_WS_RUN = re.compile(r"[ \t\f\v]+")
_CTRL = re.compile(r"[\x00-\x08\x0b-\x1f\x7f]")


def clean_text(text: str) -> str:
    """Strip control characters and collapse whitespace runs, keeping newlines."""
    text = _CTRL.sub("", text)
    lines = [_WS_RUN.sub(" ", line).strip() for line in text.split("\n")]
    return "\n".join(lines).strip()


@dataclass
class SensorColumn:
    name: str
    unit: str
    values: np.ndarray


@dataclass
class SensorTable:
    """Columnar sensor readings, one row per timestamp group."""

    columns: list[SensorColumn]
    timestamps: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.columns:
            raise ValueError("sensor table has no columns")
        lengths = {len(c.values) for c in self.columns}
        if len(lengths) != 1:
            raise ValueError(f"columns have unequal lengths: {sorted(lengths)}")
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.float64)
            if ts.shape != (self.num_rows,):
                raise ValueError("timestamps length does not match rows")
            if np.any(np.diff(ts) < 0):
                raise ValueError("timestamps must be non-decreasing")
            self.timestamps = ts

    @property
    def num_rows(self) -> int:
        return len(self.columns[0].values)

    def column(self, name: str) -> SensorColumn:
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(f"missing column: {name}")

    @classmethod
    def from_csv(
        cls,
        path: str | Path,
        units: dict[str, str] | None = None,
        timestamp_column: str | None = None,
    ) -> "SensorTable":
        """Read a CSV with a header row; non-numeric columns are skipped."""
        units = units or {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty CSV") from None
            rows = [row for row in reader if row]
        raw = {name: [row[i] for row in rows] for i, name in enumerate(header)}
        timestamps = None
        columns = []
        for name, cells in raw.items():
            try:
                values = np.array([float(c) for c in cells], dtype=np.float64)
            except ValueError:
                continue  # label or text column
            if name == timestamp_column:
                timestamps = values
            else:
                columns.append(SensorColumn(name=name, unit=units.get(name, ""), values=values))
        return cls(columns=columns, timestamps=timestamps)


@dataclass
class PromptTemplateConfig:
    """Rendering recipe for turning one row group into a prompt document."""

    context_text: str
    column_order: list[str]
    separator: str = "\n"


def normalize_series(values: Sequence[float] | np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Min-max normalize readings to integers in [0, 100].

    A degenerate range (hi == lo) maps everything to 0. Out-of-range inputs
    clamp to the endpoints.
    """
    if hi < lo:
        raise ValueError(f"hi ({hi}) must be >= lo ({lo})")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value in series")
    if hi == lo:
        return np.zeros(arr.shape, dtype=np.int64)
    scaled = np.round(100.0 * (arr - lo) / (hi - lo))
    return np.clip(scaled, 0, 100).astype(np.int64)


def transform_table(
    table: SensorTable,
    tmpl: PromptTemplateConfig,
    norm_ranges: dict[str, tuple[float, float]],
    rows_per_group: int | None = None,
) -> list[str]:
    """Render one document per row group: context, then one bracketed value
    list per column in template order."""
    if table.num_rows == 0:
        raise ValueError("empty table")
    for name in tmpl.column_order:
        if name not in norm_ranges:
            raise ValueError(f"no normalization range for column {name!r}")
    cols = {name: table.column(name) for name in tmpl.column_order}

    group = table.num_rows if rows_per_group is None else rows_per_group
    if group < 1:
        raise ValueError("rows_per_group must be >= 1")
    context = clean_text(tmpl.context_text)
    docs = []
    for start in range(0, table.num_rows, group):
        stop = min(start + group, table.num_rows)
        lines = [context] if context else []
        for name in tmpl.column_order:
            lo, hi = norm_ranges[name]
            vals = normalize_series(cols[name].values[start:stop], lo, hi)
            lines.append(f"{name}: [{', '.join(str(v) for v in vals)}]")
        docs.append(tmpl.separator.join(lines))
    return docs


def iter_text_documents(path: str | Path) -> Iterator[str]:
    """Plain-text input: one document per blank-line-separated block."""
    block: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                block.append(line.rstrip("\n"))
            elif block:
                yield "\n".join(block)
                block = []
    if block:
        yield "\n".join(block)


def tokenize_corpus(
    docs: Iterable[str],
    tokenizer: Tokenizer,
    shard_size_limit: int = DEFAULT_SHARD_SIZE,
    out_dir: str | Path = ".",
) -> list[TokenShard]:
    """Encode documents in order, each terminated by the end-of-text id, and
    store them as a fixed-size shard stream."""
    with ShardWriter(out_dir, shard_size_limit) as writer:
        for doc in docs:
            ids = tokenizer.encode(doc)
            ids.append(tokenizer.eot_id)
            writer.append(ids)
    return writer.shards


@dataclass
class MixSpec:
    """Sources to interleave and their target token proportions."""

    sources: list[tuple[str | Path, float]]
    seed: int = 0
    target_tokens: int | None = None
    shard_size_limit: int = DEFAULT_SHARD_SIZE

    def __post_init__(self) -> None:
        if not self.sources:
            raise ValueError("mix spec needs at least one source")
        total = sum(r for _, r in self.sources)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"source ratios must sum to 1, got {total}")
        if any(r < 0 for _, r in self.sources):
            raise ValueError("ratios must be non-negative")


@dataclass
class MixResult:
    shards: list[TokenShard]
    source_tokens: dict[str, int]  # realized tokens drawn per source
    total_tokens: int

    def realized_shares(self) -> dict[str, float]:
        total = max(self.total_tokens, 1)
        return {name: count / total for name, count in self.source_tokens.items()}


def mix_shards(spec: MixSpec, out_dir: str | Path, eot_id: int) -> MixResult:
    """Interleave documents from the sources by probability-based sampling.

    Each draw picks a source from Categorical(ratios) and appends that
    source's next whole document. Exhausted sources are dropped and the
    remaining ratios renormalized. Stops at ``target_tokens`` (whole documents
    only) or when every source is exhausted.
    """
    iters: list[Iterator[np.ndarray]] = []
    ratios: list[float] = []
    names: list[str] = []
    for directory, ratio in spec.sources:
        paths = shard_paths(directory)
        if not paths:
            raise ValueError(f"empty source: no shards in {directory}")
        iters.append(iter_documents(paths, eot_id))
        ratios.append(ratio)
        names.append(str(directory))
    source_tokens = {name: 0 for name in names}

    rng = derive_rng(spec.seed, "mix")
    with ShardWriter(out_dir, spec.shard_size_limit) as writer:
        while iters:
            if spec.target_tokens is not None and writer.total_tokens >= spec.target_tokens:
                break
            total = sum(ratios)
            if total <= 0:
                break
            probs = np.asarray(ratios) / total
            pick = int(rng.choice(len(iters), p=probs))
            try:
                doc = next(iters[pick])
            except StopIteration:
                log.warning(
                    "mix source exhausted: %s (renormalizing remaining ratios)",
                    names[pick],
                )
                del iters[pick], ratios[pick], names[pick]
                continue
            source_tokens[names[pick]] += int(doc.size)
            writer.append(doc)
    return MixResult(
        shards=writer.shards, source_tokens=source_tokens, total_tokens=writer.total_tokens
    )


def split_dataset(
    src: str | Path | Sequence[str | Path],
    train_ratio: float,
    seed: int,
    train_dir: str | Path,
    val_dir: str | Path,
    eot_id: int,
    shard_size_limit: int = DEFAULT_SHARD_SIZE,
) -> tuple[list[TokenShard], list[TokenShard]]:
    """Assign each document to train or validation by a seeded hash of its
    ordinal, preserving the document multiset across the two output streams."""
    if not 0 < train_ratio < 1:
        raise ValueError(f"train_ratio must be in (0, 1), got {train_ratio}")
    paths = shard_paths(src) if isinstance(src, (str, Path)) else [Path(p) for p in src]
    if not paths:
        raise ValueError("empty input: no shards to split")
    n_docs = 0
    with ShardWriter(train_dir, shard_size_limit) as train_writer, ShardWriter(
        val_dir, shard_size_limit
    ) as val_writer:
        for ordinal, doc in enumerate(iter_documents(paths, eot_id)):
            n_docs += 1
            if unit_fraction(seed, "split", ordinal) < train_ratio:
                train_writer.append(doc)
            else:
                val_writer.append(doc)
    if n_docs == 0:
        raise ValueError("empty input: shard stream contains no documents")
    return train_writer.shards, val_writer.shards
