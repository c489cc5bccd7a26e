"""Pre-training loop: AdamW, warmup+cosine learning-rate schedule, gradient
clipping, micro-batching over shard streams, checkpointing, and a CSV loss
log (schema: step,lr,train_loss,grad_norm,val_loss)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import model as m
from . import shards as sh

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    micro_batch: int = 64
    seq_len: int = 1024
    total_steps: int = 20000
    warmup_steps: int = 700
    lr_max: float = 6e-4
    lr_min: float | None = None  # defaults to 0.1 * lr_max
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    seed: int = 0
    val_interval: int = 100
    val_batches: int = 8
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    log_interval: int = 1
    cycle_data: bool = False  # wrap around the shard stream instead of stopping

    def __post_init__(self) -> None:
        if self.lr_min is None:
            self.lr_min = 0.1 * self.lr_max
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must be <= lr_max")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")


def lr_at(step: int, h: TrainHyper) -> float:
    """Linear warmup to lr_max, then cosine decay reaching lr_min exactly on
    the final step."""
    if not 0 <= step < h.total_steps:
        raise ValueError(f"step {step} out of range [0, {h.total_steps})")
    if step < h.warmup_steps:
        return h.lr_max * (step + 1) / h.warmup_steps
    decay_steps = max(h.total_steps - h.warmup_steps - 1, 1)
    progress = (step - h.warmup_steps) / decay_steps
    return h.lr_min + 0.5 * (h.lr_max - h.lr_min) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: m.Weights) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(grads: m.Weights, max_norm: float) -> tuple[m.Weights, float]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm. Returns the (possibly scaled) grads and the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm: {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


@dataclass
class OptimizerState:
    m1: dict[str, np.ndarray] = field(default_factory=dict)
    m2: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m1={k: np.zeros_like(v) for k, v in params.items()},
            m2={k: np.zeros_like(v) for k, v in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    h: TrainHyper,
    decay_ndim_min: int = 2,
) -> None:
    """Bias-corrected AdamW update in place. Decoupled weight decay applies
    only to tensors with ndim >= decay_ndim_min (matrices, not gains/biases).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - h.beta1**t
    c2 = 1.0 - h.beta2**t
    for name, p in params.items():
        g = grads[name]
        m1 = state.m1[name]
        m2 = state.m2[name]
        m1 *= h.beta1
        m1 += (1.0 - h.beta1) * g
        m2 *= h.beta2
        m2 += (1.0 - h.beta2) * g * g
        update = (m1 / c1) / (np.sqrt(m2 / c2) + h.eps)
        if h.weight_decay and p.ndim >= decay_ndim_min:
            update = update + h.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


class BatchReader:
    """Sequential (B, S+1) window reader over a shard stream.

    Consecutive steps advance by B*S tokens so each step's targets are the
    next-token shift of its inputs. With cycle=True the stream restarts when
    exhausted instead of signalling underrun.
    """

    def __init__(self, paths: Sequence[Path], batch: int, seq_len: int, cycle: bool = False):
        self.paths = list(paths)
        self.batch = batch
        self.seq_len = seq_len
        self.cycle = cycle
        self._iter = sh.iter_stream_tokens(self.paths)
        self._buf = np.empty(0, dtype=np.uint16)
        self._carry: np.ndarray | None = None

    def next_batch(self) -> tuple[np.ndarray, np.ndarray] | None:
        need = self.batch * self.seq_len + 1
        pieces = [self._buf]
        have = self._buf.size
        while have < need:
            try:
                chunk = next(self._iter)
            except StopIteration:
                if not self.cycle:
                    return None
                self._iter = sh.iter_stream_tokens(self.paths)
                chunk = next(self._iter, None)
                if chunk is None or chunk.size == 0:
                    return None
            pieces.append(chunk)
            have += chunk.size
        flat = np.concatenate(pieces)
        window = flat[:need].astype(np.int64)
        self._buf = flat[need - 1 :]  # overlap one token for the next shift
        x = window[:-1].reshape(self.batch, self.seq_len)
        y = window[1:].reshape(self.batch, self.seq_len)
        return x, y


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps_run: int
    final_train_loss: float | None
    initial_train_loss: float | None


def _validation_loss(
    cfg: m.ModelConfig, w: m.Weights, val_paths: Sequence[Path], h: TrainHyper
) -> float | None:
    reader = BatchReader(val_paths, h.micro_batch, h.seq_len)
    losses = []
    for _ in range(h.val_batches):
        batch = reader.next_batch()
        if batch is None:
            break
        logits, _ = m.forward(cfg, w, batch[0])
        losses.append(m.cross_entropy(logits, batch[1]))
    return float(np.mean(losses)) if losses else None


def train(
    cfg: m.ModelConfig,
    train_shards: str | Path | Sequence[Path],
    val_shards: str | Path | Sequence[Path] | None,
    h: TrainHyper,
    out_dir: str | Path,
) -> TrainResult:
    """Run the pre-training loop and write the final checkpoint plus loss log.

    Deterministic for a fixed (config, hyper, seed): identical runs produce
    byte-identical checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_paths = (
        sh.shard_paths(train_shards)
        if isinstance(train_shards, (str, Path))
        else [Path(p) for p in train_shards]
    )
    if not train_paths:
        raise ValueError("no training shards")
    val_paths: list[Path] = []
    if val_shards is not None:
        val_paths = (
            sh.shard_paths(val_shards)
            if isinstance(val_shards, (str, Path))
            else [Path(p) for p in val_shards]
        )
    if h.seq_len > cfg.max_seq:
        raise ValueError(f"seq_len {h.seq_len} exceeds model context {cfg.max_seq}")

    weights = m.init_weights(cfg, h.seed)
    state = OptimizerState.for_params(weights)
    reader = BatchReader(train_paths, h.micro_batch, h.seq_len, cycle=h.cycle_data)

    log_path = out_dir / "train_log.csv"
    ckpt_path = out_dir / "model.ckpt"
    first_loss: float | None = None
    last_loss: float | None = None
    steps_run = 0
    with open(log_path, "w", encoding="utf-8") as log_fh:
        log_fh.write("step,lr,train_loss,grad_norm,val_loss\n")
        for step in range(h.total_steps):
            batch = reader.next_batch()
            if batch is None:
                log.warning(
                    "shard underrun at step %d/%d; stopping early", step, h.total_steps
                )
                break
            x, y = batch
            logits, cache = m.forward(cfg, weights, x, want_cache=True)
            loss = m.cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at step {step}: {loss}")
            grads, _ = m.backward(cfg, weights, cache, y)
            del cache, logits
            try:
                grads, norm = clip_gradients(grads, h.grad_clip_norm)
            except FloatingPointError as exc:
                log.warning("step %d skipped: %s", step, exc)
                continue
            lr = lr_at(step, h)
            adamw_step(weights, grads, state, lr, h)
            steps_run += 1
            last_loss = loss
            if first_loss is None:
                first_loss = loss

            val_loss = None
            if val_paths and h.val_interval and (step + 1) % h.val_interval == 0:
                val_loss = _validation_loss(cfg, weights, val_paths, h)
            if step % h.log_interval == 0 or val_loss is not None or step == h.total_steps - 1:
                log_fh.write(
                    f"{step},{lr:.8g},{loss:.6f},{norm:.6f},"
                    f"{'' if val_loss is None else f'{val_loss:.6f}'}\n"
                )
            if h.checkpoint_interval and (step + 1) % h.checkpoint_interval == 0:
                m.save_checkpoint(out_dir / f"model_step{step + 1:06d}.ckpt", cfg, weights)

    m.save_checkpoint(ckpt_path, cfg, weights)
    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        steps_run=steps_run,
        final_train_loss=last_loss,
        initial_train_loss=first_loss,
    )
