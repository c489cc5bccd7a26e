"""Deployment runtime: affine block weight quantization, single-file model
loading, autoregressive generation with temperature and repeat penalty, and
per-run timing."""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as m
from .seeding import derive_rng
from .tokenizer import Tokenizer

QUANT_MAGIC = b"TLLMQNT1"
_QNT_HEADER = struct.Struct("<8sII")
_CFG_BLOCK = struct.Struct("<IIIII")

TAG_RAW_F32 = 0
TAG_QUANTIZED = 1


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 4
    block_size: int = 32

    def __post_init__(self) -> None:
        if self.bits not in (2, 4):
            raise ValueError(f"bits must be 2 or 4, got {self.bits}")
        if self.block_size < 1 or (self.block_size * self.bits) % 8 != 0:
            raise ValueError("block_size * bits must be a positive multiple of 8")

    @property
    def codes_per_byte(self) -> int:
        return 8 // self.bits

    @property
    def packed_bytes_per_block(self) -> int:
        return self.block_size * self.bits // 8

    @property
    def bytes_per_block(self) -> int:
        return 8 + self.packed_bytes_per_block  # f32 scale + f32 min + codes


def _is_quantized_tensor(name: str, shape: tuple[int, ...]) -> bool:
    # layernorm params, biases and position embeddings stay f32
    return len(shape) >= 2 and name != "pos_emb"


def quantize_blocks(values: np.ndarray, s: QuantScheme) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize a flat f32 array into per-block (scale, min, packed codes).

    scale = (max - min) / (2^bits - 1) per block, scale 1 for constant
    blocks; codes are round((v - min)/scale). The final short block is padded
    with zero codes.
    """
    flat = np.asarray(values, dtype=np.float32).reshape(-1)
    n_blocks = -(-flat.size // s.block_size)
    padded = np.zeros(n_blocks * s.block_size, dtype=np.float32)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, s.block_size)
    # padding zeros must not distort the final block's range
    if flat.size % s.block_size:
        fill = flat[-1]
        blocks[-1, flat.size % s.block_size :] = fill
    mins = blocks.min(axis=1)
    maxs = blocks.max(axis=1)
    levels = (1 << s.bits) - 1
    scales = (maxs - mins) / levels
    scales[scales == 0.0] = 1.0
    codes = np.clip(np.round((blocks - mins[:, None]) / scales[:, None]), 0, levels).astype(np.uint8)
    if flat.size % s.block_size:
        codes[-1, flat.size % s.block_size :] = 0
    packed = np.zeros((n_blocks, s.packed_bytes_per_block), dtype=np.uint8)
    for j in range(s.codes_per_byte):
        packed |= codes[:, j :: s.codes_per_byte] << (s.bits * j)
    return scales.astype(np.float32), mins.astype(np.float32), packed


def dequantize_blocks(
    scales: np.ndarray, mins: np.ndarray, packed: np.ndarray, size: int, s: QuantScheme
) -> np.ndarray:
    mask = (1 << s.bits) - 1
    codes = np.zeros((packed.shape[0], s.block_size), dtype=np.uint8)
    for j in range(s.codes_per_byte):
        codes[:, j :: s.codes_per_byte] = (packed >> (s.bits * j)) & mask
    values = mins[:, None] + codes.astype(np.float32) * scales[:, None]
    return values.reshape(-1)[:size]


@dataclass
class QuantResult:
    path: Path
    f32_bytes: int
    file_bytes: int


def expected_quant_file_size(cfg: m.ModelConfig, s: QuantScheme) -> int:
    total = _QNT_HEADER.size + _CFG_BLOCK.size
    for name, shape in m.tensor_shapes(cfg).items():
        size = int(np.prod(shape))
        total += 1
        if _is_quantized_tensor(name, shape):
            total += -(-size // s.block_size) * s.bytes_per_block
        else:
            total += 4 * size
    return total


def quantize_model(
    cfg: m.ModelConfig, w: m.Weights, s: QuantScheme, out_path: str | Path
) -> QuantResult:
    """Write the TLLMQNT1 single-file model: header, config block, then per
    tensor a storage tag and either raw f32 or per-block quantized data."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    f32_bytes = 4 * m.param_count_exact(cfg)
    with open(out_path, "wb") as fh:
        fh.write(_QNT_HEADER.pack(QUANT_MAGIC, s.bits, s.block_size))
        fh.write(
            _CFG_BLOCK.pack(cfg.n_layers, cfg.d_model, cfg.vocab_size, cfg.max_seq, cfg.n_heads)
        )
        for name, shape in m.tensor_shapes(cfg).items():
            arr = w[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            if _is_quantized_tensor(name, shape):
                fh.write(struct.pack("<B", TAG_QUANTIZED))
                scales, mins, packed = quantize_blocks(arr, s)
                record = np.empty((scales.size, s.bytes_per_block), dtype=np.uint8)
                record[:, 0:4] = scales.view(np.uint8).reshape(-1, 4)
                record[:, 4:8] = mins.view(np.uint8).reshape(-1, 4)
                record[:, 8:] = packed
                fh.write(record.tobytes())
            else:
                fh.write(struct.pack("<B", TAG_RAW_F32))
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return QuantResult(path=out_path, f32_bytes=f32_bytes, file_bytes=out_path.stat().st_size)


def _load_quantized(path: Path) -> tuple[m.ModelConfig, m.Weights]:
    actual = path.stat().st_size
    with open(path, "rb") as fh:
        magic, bits, block_size = _QNT_HEADER.unpack(fh.read(_QNT_HEADER.size))
        s = QuantScheme(bits=bits, block_size=block_size)
        l, c, v, t, heads = _CFG_BLOCK.unpack(fh.read(_CFG_BLOCK.size))
        cfg = m.ModelConfig(n_layers=l, d_model=c, vocab_size=v, max_seq=t, n_heads=heads)
        expected = expected_quant_file_size(cfg, s)
        if actual != expected:
            raise ValueError(f"{path}: expected file size {expected}, got {actual}")
        weights: m.Weights = {}
        for name, shape in m.tensor_shapes(cfg).items():
            (tag,) = struct.unpack("<B", fh.read(1))
            size = int(np.prod(shape))
            if tag == TAG_RAW_F32:
                weights[name] = (
                    np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy()
                )
            elif tag == TAG_QUANTIZED:
                n_blocks = -(-size // s.block_size)
                record = np.frombuffer(
                    fh.read(n_blocks * s.bytes_per_block), dtype=np.uint8
                ).reshape(n_blocks, s.bytes_per_block)
                scales = record[:, 0:4].copy().view(np.float32).reshape(-1)
                mins = record[:, 4:8].copy().view(np.float32).reshape(-1)
                packed = record[:, 8:]
                weights[name] = dequantize_blocks(scales, mins, packed, size, s).reshape(shape)
            else:
                raise ValueError(f"{path}: unknown storage tag {tag} for tensor {name}")
    return cfg, weights


def load_model(path: str | Path) -> tuple[m.ModelConfig, m.Weights]:
    """Load an f32 checkpoint or a quantized model file; quantized matrices
    are dequantized blockwise at load."""
    path = Path(path)
    if path.stat().st_size < 8:
        raise ValueError(f"{path}: file too small to hold a model header")
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == m.CKPT_MAGIC:
        return m.load_checkpoint(path)
    if magic == QUANT_MAGIC:
        return _load_quantized(path)
    raise ValueError(f"{path}: bad magic {magic!r}")


# ---------------------------------------------------------------------------
# sampling and generation

@dataclass
class GenerationParams:
    temperature: float = 0.7
    repeat_penalty: float = 1.1
    repeat_window: int = 64
    max_new_tokens: int = 300
    seed: int = 0
    threads: int = 0  # 0: library default

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.repeat_penalty < 1:
            raise ValueError("repeat_penalty must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class GenerationReport:
    prompt_tokens: int
    generated_tokens: int
    generated_text: str
    prompt_eval_rate: float  # tokens/second
    eval_rate: float  # tokens/second
    wall_time: float
    params: GenerationParams
    stopped_on_eot: bool = False


def apply_repeat_penalty(
    logits: np.ndarray, history, penalty: float, window: int = 64
) -> np.ndarray:
    """Discourage ids seen in the recent history window: positive logits are
    divided by the penalty, non-positive ones multiplied."""
    if penalty < 1:
        raise ValueError("penalty must be >= 1")
    out = np.array(logits, copy=True)
    if penalty == 1.0 or len(history) == 0:
        return out
    recent = np.unique(np.asarray(history)[-window:]).astype(np.int64)
    vals = out[recent]
    out[recent] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


def sample_token(logits: np.ndarray, params: GenerationParams, rng: np.random.Generator) -> int:
    """Greedy argmax at temperature 0 (ties to the lowest id); otherwise a
    categorical draw from softmax(logits / temperature)."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if params.temperature == 0.0:
        return int(np.argmax(logits))
    z = logits / params.temperature
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    cum = np.cumsum(probs)
    return int(np.searchsorted(cum, rng.random(), side="right").clip(0, logits.size - 1))


class _KVCache:
    """Per-generation key/value buffers; one pair of (heads, cap, head_dim)
    arrays per block."""

    def __init__(self, cfg: m.ModelConfig, dtype):
        self.k = [
            np.empty((cfg.n_heads, cfg.max_seq, cfg.head_dim), dtype=dtype)
            for _ in range(cfg.n_layers)
        ]
        self.v = [
            np.empty((cfg.n_heads, cfg.max_seq, cfg.head_dim), dtype=dtype)
            for _ in range(cfg.n_layers)
        ]
        self.length = 0


def _prefill(cfg: m.ModelConfig, w: m.Weights, tokens: np.ndarray) -> tuple[np.ndarray, _KVCache]:
    """Full forward over the context; returns last-position logits and the
    primed KV cache."""
    logits, cache = m.forward(cfg, w, tokens[None, :], want_cache=True)
    kv = _KVCache(cfg, w["tok_emb"].dtype)
    n = tokens.size
    for i, blk in enumerate(cache["blocks"]):
        kv.k[i][:, :n] = blk["k"][0]
        kv.v[i][:, :n] = blk["v"][0]
    kv.length = n
    return logits[0, -1], kv


def _ln_vec(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mean = x.mean()
    var = x.var()
    return g * ((x - mean) / np.sqrt(var + m.LN_EPS)) + b


def _decode_step(
    cfg: m.ModelConfig, w: m.Weights, kv: _KVCache, token: int, position: int
) -> np.ndarray:
    """Single-token forward against the KV cache; returns the logits vector."""
    x = w["tok_emb"][token] + w["pos_emb"][position]
    scale = 1.0 / math.sqrt(cfg.head_dim)
    n = kv.length + 1
    for i in range(cfg.n_layers):
        h1 = _ln_vec(x, w[f"h{i}.ln1.g"], w[f"h{i}.ln1.b"])
        qkv = h1 @ w[f"h{i}.qkv.w"] + w[f"h{i}.qkv.b"]
        q, k, v = np.split(qkv, 3)
        q = q.reshape(cfg.n_heads, cfg.head_dim)
        kv.k[i][:, n - 1] = k.reshape(cfg.n_heads, cfg.head_dim)
        kv.v[i][:, n - 1] = v.reshape(cfg.n_heads, cfg.head_dim)
        ks = kv.k[i][:, :n]
        vs = kv.v[i][:, :n]
        scores = np.einsum("hd,htd->ht", q, ks) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        y = np.einsum("ht,htd->hd", probs, vs).reshape(cfg.d_model)
        x = x + (y @ w[f"h{i}.proj.w"] + w[f"h{i}.proj.b"])
        h2 = _ln_vec(x, w[f"h{i}.ln2.g"], w[f"h{i}.ln2.b"])
        u = h2 @ w[f"h{i}.up.w"] + w[f"h{i}.up.b"]
        x = x + (m.gelu(u) @ w[f"h{i}.down.w"] + w[f"h{i}.down.b"])
    kv.length = n
    xf = _ln_vec(x, w["lnf.g"], w["lnf.b"])
    return xf @ w["tok_emb"].T


def generate(
    cfg: m.ModelConfig,
    w: m.Weights,
    tok: Tokenizer,
    prompt: str,
    params: GenerationParams,
) -> GenerationReport:
    """Autoregressive generation with repeat penalty and early stop at the
    end-of-text id. When the context fills up, the most recent max_seq - 1
    tokens are kept and the cache rebuilt."""
    prompt_ids = tok.encode(prompt)
    if len(prompt_ids) >= cfg.max_seq:
        raise ValueError(
            f"prompt encodes to {len(prompt_ids)} tokens; must be < context {cfg.max_seq}"
        )
    rng = derive_rng(params.seed, "generate")
    limits = threadpool_limits(limits=params.threads) if params.threads > 0 else None
    try:
        t_start = time.perf_counter()
        context = np.asarray(prompt_ids, dtype=np.int64)
        logits, kv = _prefill(cfg, w, context)
        t_prompt_done = time.perf_counter()

        full: list[int] = list(prompt_ids)
        generated: list[int] = []
        stopped_on_eot = False
        for step in range(params.max_new_tokens):
            adjusted = apply_repeat_penalty(
                logits, full, params.repeat_penalty, params.repeat_window
            )
            token = sample_token(adjusted, params, rng)
            full.append(token)
            generated.append(token)
            if token == tok.eot_id:
                stopped_on_eot = True
                break
            if step == params.max_new_tokens - 1:
                break
            if kv.length >= cfg.max_seq:
                context = np.asarray(full[-(cfg.max_seq - 1) :], dtype=np.int64)
                logits, kv = _prefill(cfg, w, context)
            else:
                logits = _decode_step(cfg, w, kv, token, kv.length)
        t_end = time.perf_counter()
    finally:
        if limits is not None:
            limits.unregister()

    prompt_time = max(t_prompt_done - t_start, 1e-9)
    eval_time = max(t_end - t_prompt_done, 1e-9)
    visible = generated[:-1] if stopped_on_eot else generated
    return GenerationReport(
        prompt_tokens=len(prompt_ids),
        generated_tokens=len(generated),
        generated_text=tok.decode(visible),
        prompt_eval_rate=len(prompt_ids) / prompt_time,
        eval_rate=len(generated) / eval_time,
        wall_time=t_end - t_start,
        params=params,
        stopped_on_eot=stopped_on_eot,
    )
