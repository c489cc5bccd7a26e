"""LoRA fine-tuning over instruction records.

Records are rendered through the Alpaca-style template, loss is computed on
response-region tokens only, and the adapter with the best evaluation loss is
kept. Adapters serialize to a little-endian ``TLLMLORA`` file.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as m
from .seeding import derive_rng
from .tokenizer import EOT_MARKER, Tokenizer

log = logging.getLogger(__name__)

ADAPTER_MAGIC = b"TLLMLORA"
ADAPTER_VERSION = 1

# projection kinds -> per-block weight-name suffix
TARGET_SUFFIX = {
    "qkv": "qkv.w",
    "attn_proj": "proj.w",
    "ffn_up": "up.w",
    "ffn_down": "down.w",
}


@dataclass
class FinetuneRecord:
    instruction: str
    input: str
    response: str

    def __post_init__(self) -> None:
        if not self.instruction or not self.response:
            raise ValueError("instruction and response must be non-empty")


def render_prompt(rec: FinetuneRecord, include_response: bool = False) -> str:
    """Alpaca-style template; an empty input omits the Input section, and the
    response (when included) is terminated by the end-of-text marker."""
    parts = [f"### Instruction:\n{rec.instruction}\n\n"]
    if rec.input:
        parts.append(f"### Input:\n{rec.input}\n\n")
    parts.append("### Response:\n")
    if include_response:
        parts.append(rec.response + EOT_MARKER)
    return "".join(parts)


def load_records(path: str | Path) -> list[FinetuneRecord]:
    """JSON-lines input: one object per line with keys instruction/input/output."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                records.append(
                    FinetuneRecord(
                        instruction=obj["instruction"],
                        input=obj.get("input", ""),
                        response=obj["output"],
                    )
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing key {exc}") from exc
    return records


def build_ft_dataset(
    records: Sequence[FinetuneRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[FinetuneRecord], list[FinetuneRecord], list[FinetuneRecord]]:
    """Seeded shuffle, then contiguous train/val/test split at rounded
    boundaries. The three parts exactly partition the input."""
    if len(records) < 3:
        raise ValueError(f"need at least 3 records, got {len(records)}")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    order = derive_rng(seed, "ft_split").permutation(len(records))
    shuffled = [records[i] for i in order]
    n = len(shuffled)
    n_train = round(n * ratios[0])
    n_val = round(n * ratios[1])
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.0
    targets: tuple[str, ...] = ("qkv", "attn_proj")
    lr: float = 5e-4
    steps: int = 300
    grad_accum: int = 1
    batch: int = 4
    seed: int = 0
    eval_interval: int = 10
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        unknown = set(self.targets) - set(TARGET_SUFFIX)
        if unknown:
            raise ValueError(f"unknown targets: {sorted(unknown)}")


@dataclass
class LoraAdapter:
    """Low-rank (A, B) factor pairs per targeted projection matrix.

    B starts at zero so a fresh adapter is the identity; the effective delta
    on a targeted matrix is (alpha/rank) * B @ A (out x in orientation).
    """

    rank: int
    alpha: float
    targets: tuple[str, ...]
    tensors: dict[str, tuple[np.ndarray, np.ndarray]]  # weight name -> (A, B)
    merged: bool = False

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            rank=self.rank,
            alpha=self.alpha,
            targets=self.targets,
            tensors={k: (a.copy(), b.copy()) for k, (a, b) in self.tensors.items()},
            merged=self.merged,
        )


def target_weight_names(cfg: m.ModelConfig, targets: Sequence[str]) -> list[str]:
    names = []
    for i in range(cfg.n_layers):
        for t in targets:
            names.append(f"h{i}.{TARGET_SUFFIX[t]}")
    return names


def init_adapter(cfg: m.ModelConfig, lora: LoraConfig, dtype=np.float32) -> LoraAdapter:
    """A ~ normal(0, 0.02), B = 0: the adapter starts as an exact no-op."""
    rng = derive_rng(lora.seed, "lora_init")
    shapes = m.tensor_shapes(cfg)
    tensors = {}
    for name in target_weight_names(cfg, lora.targets):
        in_dim, out_dim = shapes[name]
        a = rng.normal(0.0, 0.02, size=(lora.rank, in_dim)).astype(dtype)
        b = np.zeros((out_dim, lora.rank), dtype=dtype)
        tensors[name] = (a, b)
    return LoraAdapter(rank=lora.rank, alpha=lora.alpha, targets=tuple(lora.targets), tensors=tensors)


def adapter_slots(adapter: LoraAdapter, dropout: float = 0.0) -> dict[str, m.AdapterSlot]:
    return {
        name: m.AdapterSlot(A=a, B=b, scale=adapter.scale, dropout=dropout)
        for name, (a, b) in adapter.tensors.items()
    }


def lora_forward(
    cfg: m.ModelConfig, w: m.Weights, adapter: LoraAdapter, tokens: np.ndarray
) -> np.ndarray:
    """Evaluation-mode forward with the adapter applied (no dropout)."""
    logits, _ = m.forward(cfg, w, tokens, adapters=adapter_slots(adapter))
    return logits


def merge(w: m.Weights, adapter: LoraAdapter) -> m.Weights:
    """Fold the adapter delta into a copy of the base weights.

    Each merge consumes the adapter (merged flag) so the same delta cannot be
    applied twice by accident.
    """
    if adapter.merged:
        raise ValueError("adapter was already merged; refusing to apply the delta twice")
    merged = {k: v.copy() for k, v in w.items()}
    for name, (a, b) in adapter.tensors.items():
        if name not in merged:
            raise ValueError(f"adapter target {name} not present in base weights")
        delta = (a.T @ b.T) * adapter.scale  # (in, out) orientation
        if delta.shape != merged[name].shape:
            raise ValueError(
                f"adapter shape mismatch on {name}: {delta.shape} vs {merged[name].shape}"
            )
        merged[name] = (merged[name] + delta).astype(w[name].dtype, copy=False)
    adapter.merged = True
    return merged


# ---------------------------------------------------------------------------
# training

def encode_record(
    rec: FinetuneRecord, tok: Tokenizer, max_seq: int
) -> tuple[np.ndarray, int] | None:
    """Token ids of the full rendered record and the prompt-region length.
    Returns None when the record overflows the context."""
    prompt_ids = tok.encode(render_prompt(rec, include_response=False))
    full_ids = tok.encode(render_prompt(rec, include_response=True))
    if len(full_ids) > max_seq:
        return None
    return np.asarray(full_ids, dtype=np.int64), len(prompt_ids)


def _batch_arrays(
    encoded: Sequence[tuple[np.ndarray, int]], pad_id: int
) -> tuple[np.ndarray, np.ndarray]:
    """Pack records into (x, y) with prompt and padding positions masked out
    of the loss (-1 targets)."""
    width = max(len(ids) for ids, _ in encoded)
    x = np.full((len(encoded), width - 1), pad_id, dtype=np.int64)
    y = np.full((len(encoded), width - 1), -1, dtype=np.int64)
    for row, (ids, prompt_len) in enumerate(encoded):
        n = len(ids)
        x[row, : n - 1] = ids[:-1]
        y[row, : n - 1] = ids[1:]
        y[row, : max(prompt_len - 1, 0)] = -1  # loss only on response tokens
    return x, y


def _masked_loss(
    cfg: m.ModelConfig,
    w: m.Weights,
    adapter: LoraAdapter,
    encoded: Sequence[tuple[np.ndarray, int]],
    pad_id: int,
    batch: int,
) -> float:
    losses = []
    weights = []
    for start in range(0, len(encoded), batch):
        x, y = _batch_arrays(encoded[start : start + batch], pad_id)
        logits, _ = m.forward(cfg, w, x, adapters=adapter_slots(adapter))
        losses.append(m.cross_entropy(logits, y))
        weights.append(int((y != -1).sum()))
    return float(np.average(losses, weights=weights))


@dataclass
class FinetuneMetrics:
    rows: list[tuple[int, float, float | None]] = field(default_factory=list)
    best_step: int = 0
    best_eval_loss: float = math.inf

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,train_loss,eval_loss\n")
            for step, train_loss, eval_loss in self.rows:
                fh.write(
                    f"{step},{train_loss:.6f},{'' if eval_loss is None else f'{eval_loss:.6f}'}\n"
                )


def finetune(
    cfg: m.ModelConfig,
    w: m.Weights,
    lora: LoraConfig,
    train_records: Sequence[FinetuneRecord],
    val_records: Sequence[FinetuneRecord],
    tok: Tokenizer,
) -> tuple[LoraAdapter, FinetuneMetrics]:
    """AdamW over adapter tensors only, with gradient accumulation and
    best-by-evaluation-loss adapter selection."""
    encoded_train = []
    skipped = 0
    for rec in train_records:
        enc = encode_record(rec, tok, cfg.max_seq)
        if enc is None:
            skipped += 1
        else:
            encoded_train.append(enc)
    if skipped:
        log.warning("%d fine-tune records overflow the context and were skipped", skipped)
    if not encoded_train:
        raise ValueError("all fine-tune records overflow the model context")
    encoded_val = [
        enc for rec in val_records if (enc := encode_record(rec, tok, cfg.max_seq)) is not None
    ]
    eval_records = encoded_val or encoded_train
    pad_id = tok.eot_id

    adapter = init_adapter(cfg, lora, dtype=w["tok_emb"].dtype)
    flat_params: dict[str, np.ndarray] = {}
    for name, (a, b) in adapter.tensors.items():
        flat_params[name + ":A"] = a
        flat_params[name + ":B"] = b
    m1 = {k: np.zeros_like(v) for k, v in flat_params.items()}
    m2 = {k: np.zeros_like(v) for k, v in flat_params.items()}

    metrics = FinetuneMetrics()
    best = adapter.copy()
    metrics.best_eval_loss = _masked_loss(cfg, w, adapter, eval_records, pad_id, lora.batch)
    order_rng = derive_rng(lora.seed, "ft_order")
    order: list[int] = []

    for step in range(lora.steps):
        accum = {k: np.zeros_like(v) for k, v in flat_params.items()}
        step_losses = []
        for micro in range(lora.grad_accum):
            take = []
            while len(take) < min(lora.batch, len(encoded_train)):
                if not order:
                    order = list(order_rng.permutation(len(encoded_train)))
                take.append(encoded_train[order.pop()])
            x, y = _batch_arrays(take, pad_id)
            dropout_rng = (
                derive_rng(lora.seed, "ft_dropout", step, micro) if lora.dropout > 0 else None
            )
            logits, cache = m.forward(
                cfg,
                w,
                x,
                adapters=adapter_slots(adapter, dropout=lora.dropout),
                dropout_rng=dropout_rng,
                want_cache=True,
            )
            step_losses.append(m.cross_entropy(logits, y))
            _, ad_grads = m.backward(cfg, w, cache, y, want_weight_grads=False)
            for name, (da, db) in ad_grads.items():
                accum[name + ":A"] += da
                accum[name + ":B"] += db
        train_loss = float(np.mean(step_losses))
        if not math.isfinite(train_loss):
            raise RuntimeError(f"non-finite fine-tune loss at step {step}")

        t = step + 1
        c1 = 1.0 - lora.beta1**t
        c2 = 1.0 - lora.beta2**t
        for name, p in flat_params.items():
            g = accum[name] / lora.grad_accum
            m1[name] = lora.beta1 * m1[name] + (1.0 - lora.beta1) * g
            m2[name] = lora.beta2 * m2[name] + (1.0 - lora.beta2) * g * g
            p -= (lora.lr * (m1[name] / c1) / (np.sqrt(m2[name] / c2) + lora.eps)).astype(
                p.dtype, copy=False
            )

        eval_loss = None
        is_last = step == lora.steps - 1
        if is_last or (lora.eval_interval and (step + 1) % lora.eval_interval == 0):
            eval_loss = _masked_loss(cfg, w, adapter, eval_records, pad_id, lora.batch)
            if eval_loss < metrics.best_eval_loss:
                metrics.best_eval_loss = eval_loss
                metrics.best_step = step + 1
                best = adapter.copy()
        metrics.rows.append((step + 1, train_loss, eval_loss))

    return best, metrics


# ---------------------------------------------------------------------------
# adapter file format

def save_adapter(path: str | Path, adapter: LoraAdapter) -> Path:
    """TLLMLORA file: u32 version, u32 rank, f32 alpha, u32 target count,
    then per target a u32-length-prefixed ASCII name and the A, B tensors as
    little-endian f32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(ADAPTER_MAGIC)
        fh.write(struct.pack("<IIfI", ADAPTER_VERSION, adapter.rank, adapter.alpha, len(adapter.tensors)))
        for name, (a, b) in adapter.tensors.items():
            encoded = name.encode("ascii")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return path


def load_adapter(path: str | Path, cfg: m.ModelConfig) -> LoraAdapter:
    """Read a TLLMLORA file; tensor shapes come from the model config."""
    path = Path(path)
    shapes = m.tensor_shapes(cfg)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != ADAPTER_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {ADAPTER_MAGIC!r}")
        version, rank, alpha, count = struct.unpack("<IIfI", fh.read(16))
        if version != ADAPTER_VERSION:
            raise ValueError(f"{path}: unsupported adapter version {version}")
        tensors = {}
        suffixes = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("ascii")
            if name not in shapes:
                raise ValueError(f"{path}: adapter target {name} unknown for this model")
            in_dim, out_dim = shapes[name]
            a = np.frombuffer(fh.read(4 * rank * in_dim), dtype="<f4").reshape(rank, in_dim).copy()
            b = np.frombuffer(fh.read(4 * out_dim * rank), dtype="<f4").reshape(out_dim, rank).copy()
            tensors[name] = (a, b)
            for kind, suffix in TARGET_SUFFIX.items():
                if name.endswith(suffix):
                    suffixes[kind] = True
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after adapter payload")
    return LoraAdapter(rank=rank, alpha=alpha, targets=tuple(sorted(suffixes)), tensors=tensors)
