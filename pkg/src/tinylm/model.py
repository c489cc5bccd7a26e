"""Decoder-only transformer in the GPT-2 family: configuration, exact
parameter counting, initialization, forward pass, cross-entropy loss, and a
full manual backward pass over named numpy tensors.

Pre-norm blocks (x += Attn(LN1(x)); x += FFN(LN2(x))), learned absolute
position embeddings, tanh-approximation GELU, and an output head weight-tied
to the token embedding. Compute dtype follows the weight dtype (f32 shipped;
tests may run f64 for finite-difference checks).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .seeding import derive_rng

CKPT_MAGIC = b"TLLMCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIIII")

LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)

Weights = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters: depth, width, vocab, context, heads."""

    n_layers: int
    d_model: int
    vocab_size: int = 50257
    max_seq: int = 1024
    n_heads: int | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.n_layers <= 64:
            raise ValueError(f"n_layers must be in [1, 64], got {self.n_layers}")
        if self.max_seq < 1:
            raise ValueError("max_seq must be >= 1")
        if self.n_heads is None:
            if self.d_model % 64 != 0:
                raise ValueError("d_model must be a multiple of 64 when n_heads is unset")
            object.__setattr__(self, "n_heads", self.d_model // 64)
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def family_config(depth: int, max_seq: int = 1024, vocab_size: int = 50257) -> ModelConfig:
    """The scaling family: hidden size fixed at 64 * depth, head size 64."""
    return ModelConfig(n_layers=depth, d_model=64 * depth, vocab_size=vocab_size, max_seq=max_seq)


def block_weight_names(i: int) -> list[str]:
    return [
        f"h{i}.ln1.g",
        f"h{i}.ln1.b",
        f"h{i}.qkv.w",
        f"h{i}.qkv.b",
        f"h{i}.proj.w",
        f"h{i}.proj.b",
        f"h{i}.ln2.g",
        f"h{i}.ln2.b",
        f"h{i}.up.w",
        f"h{i}.up.b",
        f"h{i}.down.w",
        f"h{i}.down.b",
    ]


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Named tensor set in the fixed checkpoint order. The output head is
    weight-tied to ``tok_emb`` and has no tensor of its own."""
    c = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, c),
        "pos_emb": (cfg.max_seq, c),
    }
    for i in range(cfg.n_layers):
        shapes[f"h{i}.ln1.g"] = (c,)
        shapes[f"h{i}.ln1.b"] = (c,)
        shapes[f"h{i}.qkv.w"] = (c, 3 * c)
        shapes[f"h{i}.qkv.b"] = (3 * c,)
        shapes[f"h{i}.proj.w"] = (c, c)
        shapes[f"h{i}.proj.b"] = (c,)
        shapes[f"h{i}.ln2.g"] = (c,)
        shapes[f"h{i}.ln2.b"] = (c,)
        shapes[f"h{i}.up.w"] = (c, 4 * c)
        shapes[f"h{i}.up.b"] = (4 * c,)
        shapes[f"h{i}.down.w"] = (4 * c, c)
        shapes[f"h{i}.down.b"] = (c,)
    shapes["lnf.g"] = (c,)
    shapes["lnf.b"] = (c,)
    return shapes


def param_count_exact(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in tensor_shapes(cfg).values())


def param_count_empirical(depth: int) -> float:
    """Empirical size law for the 64*depth family, in millions of parameters."""
    return 0.05 * depth**3 + 3.2 * depth


def init_weights(cfg: ModelConfig, seed: int, dtype=np.float32) -> Weights:
    """normal(0, 0.02) matrices; residual-path projections scaled by
    1/sqrt(2 * n_layers); layernorm gains 1; all biases 0."""
    rng = derive_rng(seed, "init")
    residual_scale = 1.0 / math.sqrt(2.0 * cfg.n_layers)
    weights: Weights = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.endswith(".g"):
            weights[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".b") or len(shape) == 1:
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            std = 0.02
            if name.endswith(("proj.w", "down.w")):
                std *= residual_scale
            weights[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return weights


# ---------------------------------------------------------------------------
# LoRA adapter slots (owned by the finetune stage; the forward/backward here
# only needs shapes and scale)

@dataclass
class AdapterSlot:
    """Low-rank branch on one weight matrix W (in, out): W + scale * A^T B^T
    with A (r, in), B (out, r)."""

    A: np.ndarray
    B: np.ndarray
    scale: float
    dropout: float = 0.0


def _dropout_mask(rng: np.random.Generator, shape, p: float, dtype) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype.type(1.0 - p)


# ---------------------------------------------------------------------------
# forward

def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * rstd
    return g * xhat + b, xhat, rstd


def gelu(u: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU (the variant the GPT-2 lineage uses)."""
    return 0.5 * u * (1.0 + np.tanh(_GELU_K * (u + 0.044715 * u**3)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_K * (u + 0.044715 * u**3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * u * u)


def _linear_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    adapter: AdapterSlot | None,
    dropout_rng: np.random.Generator | None,
    site_cache: dict,
):
    out = x @ w + b
    site_cache["x"] = x
    if adapter is not None:
        if adapter.dropout > 0.0 and dropout_rng is not None:
            mask = _dropout_mask(dropout_rng, x.shape, adapter.dropout, x.dtype)
            xa = x * mask
            site_cache["mask"] = mask
        else:
            xa = x
        ua = xa @ adapter.A.T
        out = out + (ua @ adapter.B.T) * adapter.scale
        site_cache["xa"] = xa
        site_cache["ua"] = ua
    return out


def forward(
    cfg: ModelConfig,
    w: Weights,
    tokens: np.ndarray,
    adapters: dict[str, AdapterSlot] | None = None,
    dropout_rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Causal forward pass over a (B, S) batch of token ids.

    Returns (logits, cache); cache is None unless requested. ``adapters``
    maps weight names to low-rank branches; ``dropout_rng`` enables adapter
    dropout (training mode).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, S = tokens.shape
    if S > cfg.max_seq:
        raise ValueError(f"sequence length {S} exceeds max context {cfg.max_seq}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise ValueError("token id out of range")
    adapters = adapters or {}

    x = w["tok_emb"][tokens] + w["pos_emb"][:S]
    causal = np.tril(np.ones((S, S), dtype=bool))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    cache: dict = {"tokens": tokens, "blocks": [], "adapters": adapters}

    for i in range(cfg.n_layers):
        blk: dict = {"sites": {}}
        h1, xhat1, rstd1 = _layernorm(x, w[f"h{i}.ln1.g"], w[f"h{i}.ln1.b"])
        name_qkv = f"h{i}.qkv.w"
        site_qkv: dict = {}
        qkv = _linear_forward(
            h1, w[name_qkv], w[f"h{i}.qkv.b"], adapters.get(name_qkv), dropout_rng, site_qkv
        )
        q, k, v = np.split(qkv, 3, axis=-1)
        q = q.reshape(B, S, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)
        k = k.reshape(B, S, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)
        v = v.reshape(B, S, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(causal, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        y = (probs @ v).transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model)
        name_proj = f"h{i}.proj.w"
        site_proj: dict = {}
        attn_out = _linear_forward(
            y, w[name_proj], w[f"h{i}.proj.b"], adapters.get(name_proj), dropout_rng, site_proj
        )
        x = x + attn_out

        h2, xhat2, rstd2 = _layernorm(x, w[f"h{i}.ln2.g"], w[f"h{i}.ln2.b"])
        name_up = f"h{i}.up.w"
        site_up: dict = {}
        u = _linear_forward(
            h2, w[name_up], w[f"h{i}.up.b"], adapters.get(name_up), dropout_rng, site_up
        )
        g_act = gelu(u)
        name_down = f"h{i}.down.w"
        site_down: dict = {}
        ffn_out = _linear_forward(
            g_act, w[name_down], w[f"h{i}.down.b"], adapters.get(name_down), dropout_rng, site_down
        )
        x = x + ffn_out

        if want_cache:
            blk["xhat1"], blk["rstd1"] = xhat1, rstd1
            blk["q"], blk["k"], blk["v"], blk["probs"] = q, k, v, probs
            blk["xhat2"], blk["rstd2"] = xhat2, rstd2
            blk["u"] = u
            blk["sites"] = {
                name_qkv: site_qkv,
                name_proj: site_proj,
                name_up: site_up,
                name_down: site_down,
            }
            cache["blocks"].append(blk)

    xf, xhatf, rstdf = _layernorm(x, w["lnf.g"], w["lnf.b"])
    logits = xf @ w["tok_emb"].T
    if want_cache:
        cache["xhatf"], cache["rstdf"], cache["xf"] = xhatf, rstdf, xf
        cache["logits"] = logits
        return logits, cache
    return logits, None


def cross_entropy(logits: np.ndarray, targets: np.ndarray, ignore_index: int = -1) -> float:
    """Mean negative log softmax probability of the targets, in nats/token.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} != logits batch {logits.shape[:-1]}")
    mask = targets != ignore_index
    if not mask.any():
        raise ValueError("no unmasked target positions")
    valid = np.clip(targets, 0, None)
    if valid.max() >= logits.shape[-1]:
        raise ValueError("target id out of range")
    m = logits.max(axis=-1)
    lse = m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))
    picked = np.take_along_axis(logits, valid[..., None], axis=-1)[..., 0]
    losses = (lse - picked)[mask]
    return float(losses.mean(dtype=np.float64))


# ---------------------------------------------------------------------------
# backward

def _linear_backward(
    d_out: np.ndarray,
    w_name: str,
    w: Weights,
    site: dict,
    adapters: dict[str, AdapterSlot],
    grads: Weights | None,
    adapter_grads: dict,
) -> np.ndarray:
    x = site["x"]
    weight = w[w_name]
    in_dim = x.shape[-1]
    out_dim = d_out.shape[-1]
    x2 = x.reshape(-1, in_dim)
    d2 = d_out.reshape(-1, out_dim)
    if grads is not None:
        grads[w_name] += x2.T @ d2
        grads[w_name.replace(".w", ".b")] += d2.sum(axis=0)
    dx = d_out @ weight.T
    adapter = adapters.get(w_name)
    if adapter is not None:
        dua = (d_out @ adapter.B) * adapter.scale
        xa = site["xa"]
        dA = dua.reshape(-1, adapter.A.shape[0]).T @ xa.reshape(-1, in_dim)
        dB = (d2 * adapter.scale).T @ site["ua"].reshape(-1, adapter.A.shape[0])
        dxa = dua @ adapter.A
        if "mask" in site:
            dxa = dxa * site["mask"]
        dx = dx + dxa
        acc = adapter_grads.setdefault(w_name, [np.zeros_like(adapter.A), np.zeros_like(adapter.B)])
        acc[0] += dA
        acc[1] += dB
    return dx


def _layernorm_backward(d_out, xhat, rstd, g, grads, g_name, b_name):
    if grads is not None:
        sum_axes = tuple(range(d_out.ndim - 1))
        grads[g_name] += (d_out * xhat).sum(axis=sum_axes)
        grads[b_name] += d_out.sum(axis=sum_axes)
    d_xhat = d_out * g
    return rstd * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
    )


def backward(
    cfg: ModelConfig,
    w: Weights,
    cache: dict | None,
    targets: np.ndarray,
    ignore_index: int = -1,
    loss_scale: float = 1.0,
    want_weight_grads: bool = True,
):
    """Exact gradients of the mean cross-entropy w.r.t. every weight tensor
    (and any adapter tensors seen in the forward).

    Requires the cache from ``forward(..., want_cache=True)`` on the same
    batch. Returns (weight_grads, adapter_grads); weight_grads mirrors the
    ModelWeights structure, with the tied embedding accumulating both the
    embedding and the output-head contributions.
    """
    if cache is None or "logits" not in cache:
        raise ValueError("missing activation cache: run forward(want_cache=True) first")
    tokens = cache["tokens"]
    targets = np.asarray(targets)
    if targets.shape != tokens.shape:
        raise ValueError("stale activation cache: targets shape mismatch")
    if len(cache["blocks"]) != cfg.n_layers:
        raise ValueError("stale activation cache: block count mismatch")
    logits = cache["logits"]
    adapters: dict[str, AdapterSlot] = cache.get("adapters") or {}
    B, S = tokens.shape

    mask = targets != ignore_index
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("no unmasked target positions")
    valid = np.clip(targets, 0, None)

    m = logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits - m)
    probs /= probs.sum(axis=-1, keepdims=True)
    d_logits = probs
    np.put_along_axis(
        d_logits, valid[..., None], np.take_along_axis(d_logits, valid[..., None], axis=-1) - 1.0, axis=-1
    )
    d_logits *= (loss_scale / n_valid) * mask[..., None]

    dtype = w["tok_emb"].dtype
    grads: Weights | None = None
    if want_weight_grads:
        grads = {name: np.zeros(shape, dtype=dtype) for name, shape in tensor_shapes(cfg).items()}
    adapter_grads: dict[str, list[np.ndarray]] = {}

    # tied head: logits = xf @ tok_emb.T
    xf = cache["xf"]
    d2 = d_logits.reshape(-1, cfg.vocab_size)
    if grads is not None:
        grads["tok_emb"] += d2.T @ xf.reshape(-1, cfg.d_model)
    d_xf = d_logits @ w["tok_emb"]
    dx = _layernorm_backward(
        d_xf, cache["xhatf"], cache["rstdf"], w["lnf.g"], grads, "lnf.g", "lnf.b"
    )

    head_scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in reversed(range(cfg.n_layers)):
        blk = cache["blocks"][i]
        sites = blk["sites"]
        # ffn branch
        d_ffn = _linear_backward(
            dx, f"h{i}.down.w", w, sites[f"h{i}.down.w"], adapters, grads, adapter_grads
        )
        d_u = d_ffn * _gelu_grad(blk["u"])
        d_h2 = _linear_backward(
            d_u, f"h{i}.up.w", w, sites[f"h{i}.up.w"], adapters, grads, adapter_grads
        )
        dx = dx + _layernorm_backward(
            d_h2, blk["xhat2"], blk["rstd2"], w[f"h{i}.ln2.g"], grads, f"h{i}.ln2.g", f"h{i}.ln2.b"
        )
        # attention branch
        d_y = _linear_backward(
            dx, f"h{i}.proj.w", w, sites[f"h{i}.proj.w"], adapters, grads, adapter_grads
        )
        d_heads = d_y.reshape(B, S, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)
        probs_i, q, k, v = blk["probs"], blk["q"], blk["k"], blk["v"]
        d_probs = d_heads @ v.transpose(0, 1, 3, 2)
        d_v = probs_i.transpose(0, 1, 3, 2) @ d_heads
        d_scores = probs_i * (d_probs - (d_probs * probs_i).sum(axis=-1, keepdims=True))
        d_q = (d_scores @ k) * head_scale
        d_k = (d_scores.transpose(0, 1, 3, 2) @ q) * head_scale
        d_qkv = np.concatenate(
            [
                d_q.transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model),
                d_k.transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model),
                d_v.transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model),
            ],
            axis=-1,
        )
        d_h1 = _linear_backward(
            d_qkv, f"h{i}.qkv.w", w, sites[f"h{i}.qkv.w"], adapters, grads, adapter_grads
        )
        dx = dx + _layernorm_backward(
            d_h1, blk["xhat1"], blk["rstd1"], w[f"h{i}.ln1.g"], grads, f"h{i}.ln1.g", f"h{i}.ln1.b"
        )

    if grads is not None:
        np.add.at(grads["tok_emb"], tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
        np.add.at(grads["pos_emb"], np.arange(S), dx.sum(axis=0))

    adapter_out = {name: (dA, dB) for name, (dA, dB) in adapter_grads.items()}
    return (grads if grads is not None else {}), adapter_out


# ---------------------------------------------------------------------------
# checkpoint file format

def save_checkpoint(path: str | Path, cfg: ModelConfig, w: Weights) -> Path:
    """Write magic, u32 version/l/C/V/T/heads, then f32 row-major tensors in
    the fixed documented order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CKPT_MAGIC,
                CKPT_VERSION,
                cfg.n_layers,
                cfg.d_model,
                cfg.vocab_size,
                cfg.max_seq,
                cfg.n_heads,
            )
        )
        for name, shape in tensor_shapes(cfg).items():
            arr = w[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, Weights]:
    path = Path(path)
    actual_size = path.stat().st_size
    if actual_size < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint ({actual_size} bytes)")
    with open(path, "rb") as fh:
        magic, version, l, c, v, t, heads = _CKPT_HEADER.unpack(fh.read(_CKPT_HEADER.size))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        cfg = ModelConfig(n_layers=l, d_model=c, vocab_size=v, max_seq=t, n_heads=heads)
        expected_size = _CKPT_HEADER.size + 4 * param_count_exact(cfg)
        if actual_size != expected_size:
            raise ValueError(
                f"{path}: expected file size {expected_size}, got {actual_size}"
            )
        weights: Weights = {}
        for name, shape in tensor_shapes(cfg).items():
            count = int(np.prod(shape))
            data = fh.read(4 * count)
            weights[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return cfg, weights
