"""Sectioned key-value pipeline configuration with strict key validation.

Grammar: INI-style sections, ``key = value`` pairs, ``#``/``;`` comments,
multiline list values via indented continuation lines.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

KNOWN_KEYS: dict[str, set[str]] = {
    "global": {"seed", "work_dir"},
    "prepare": {
        "sensor_csv",
        "timestamp_column",
        "columns",
        "ranges",
        "units",
        "context",
        "rows_per_doc",
        "out_docs",
    },
    "tokenize": {"inputs", "shard_mb"},
    "mix": {"sources", "out_dir", "target_tokens", "shard_mb"},
    "split": {"in_dir", "train_dir", "val_dir", "train_ratio", "shard_mb"},
    "pretrain": {
        "depth",
        "hidden",
        "heads",
        "ctx",
        "train_dir",
        "val_dir",
        "out_dir",
        "micro_batch",
        "seq_len",
        "total_steps",
        "warmup_steps",
        "lr_max",
        "lr_min",
        "grad_clip_norm",
        "weight_decay",
        "val_interval",
        "val_batches",
        "checkpoint_interval",
        "log_interval",
        "cycle_data",
    },
    "finetune": {
        "base",
        "records",
        "out_dir",
        "rank",
        "alpha",
        "dropout",
        "targets",
        "lr",
        "steps",
        "grad_accum",
        "batch",
        "ratios",
        "eval_interval",
    },
    "merge": {"base", "adapter", "out"},
    "quantize": {"model", "bits", "block_size", "out"},
    "generate": {
        "model",
        "prompt",
        "prompt_file",
        "temperature",
        "greedy",
        "repeat_penalty",
        "repeat_window",
        "max_new_tokens",
        "threads",
        "out_report",
    },
    "eval": {"model", "cases", "k", "greedy", "temperature", "out_csv", "threads"},
    "bench": {
        "model",
        "prompt",
        "max_new_tokens",
        "instances",
        "background",
        "out_csv",
        "threads",
        "temperature",
    },
}

STAGES = [s for s in KNOWN_KEYS if s != "global"]


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    path: Path
    sections: dict[str, dict[str, str]]
    seed: int

    def section(self, name: str) -> dict[str, str]:
        if name not in self.sections:
            raise ConfigError(f"config has no [{name}] section ({self.path})")
        return self.sections[name]

    def get(self, section: str, key: str, default: str | None = None) -> str | None:
        return self.sections.get(section, {}).get(key, default)


def load_config(path: str | Path, seed_override: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str  # keep key case
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    sections: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        known = KNOWN_KEYS[section]
        body = {}
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            body[key] = value.strip()
        sections[section] = body

    seed = seed_override
    if seed is None:
        seed_str = sections.get("global", {}).get("seed", "0")
        try:
            seed = int(seed_str)
        except ValueError:
            raise ConfigError(f"{path}: global seed must be an integer, got {seed_str!r}") from None
    return PipelineConfig(path=path, sections=sections, seed=seed)


def parse_pairs(value: str, separator: str = "->") -> list[tuple[str, str]]:
    """Parse multiline ``left -> right`` entries."""
    pairs = []
    for raw in value.splitlines():
        line = raw.strip()
        if not line:
            continue
        if separator not in line:
            raise ConfigError(f"expected {separator!r} in list entry: {line!r}")
        left, right = line.split(separator, 1)
        pairs.append((left.strip(), right.strip()))
    return pairs


def parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")
