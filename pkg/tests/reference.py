"""Independent straight-line oracles used to check the package implementation.

Everything here is written against the math directly (per-position loops,
no shared code with tinylm's forward/backward) so that agreement is evidence
of correctness rather than of shared bugs.
"""

from __future__ import annotations

import math

import numpy as np


def ref_layernorm(x, g, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return g * (x - mu) / math.sqrt(var + eps) + b


def ref_gelu(u):
    return 0.5 * u * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (u + 0.044715 * u**3)))


def ref_softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def ref_forward(cfg, w, tokens, adapters=None):
    """Loop-based forward pass for one (B, S) batch. Returns (B, S, V) logits."""
    tokens = np.atleast_2d(tokens)
    B, S = tokens.shape
    H, hd, C = cfg.n_heads, cfg.head_dim, cfg.d_model
    adapters = adapters or {}

    def linear(x_vec, name, bias):
        out = x_vec @ w[name] + bias
        if name in adapters:
            A, Bmat, scale = adapters[name]
            out = out + scale * ((x_vec @ A.T) @ Bmat.T)
        return out

    logits = np.zeros((B, S, cfg.vocab_size), dtype=np.float64)
    for bi in range(B):
        x = np.stack(
            [w["tok_emb"][tokens[bi, t]] + w["pos_emb"][t] for t in range(S)]
        ).astype(np.float64)
        for li in range(cfg.n_layers):
            h1 = np.stack(
                [ref_layernorm(x[t], w[f"h{li}.ln1.g"], w[f"h{li}.ln1.b"]) for t in range(S)]
            )
            qkv = np.stack([linear(h1[t], f"h{li}.qkv.w", w[f"h{li}.qkv.b"]) for t in range(S)])
            attn_out = np.zeros((S, C))
            for t in range(S):
                merged = np.zeros(C)
                for h in range(H):
                    q = qkv[t, h * hd : (h + 1) * hd]
                    scores = np.array(
                        [
                            q @ qkv[u, C + h * hd : C + (h + 1) * hd] / math.sqrt(hd)
                            for u in range(t + 1)
                        ]
                    )
                    probs = ref_softmax(scores)
                    v_rows = np.stack(
                        [qkv[u, 2 * C + h * hd : 2 * C + (h + 1) * hd] for u in range(t + 1)]
                    )
                    merged[h * hd : (h + 1) * hd] = probs @ v_rows
                attn_out[t] = linear(merged, f"h{li}.proj.w", w[f"h{li}.proj.b"])
            x = x + attn_out
            h2 = np.stack(
                [ref_layernorm(x[t], w[f"h{li}.ln2.g"], w[f"h{li}.ln2.b"]) for t in range(S)]
            )
            up = np.stack([linear(h2[t], f"h{li}.up.w", w[f"h{li}.up.b"]) for t in range(S)])
            act = ref_gelu(up)
            down = np.stack([linear(act[t], f"h{li}.down.w", w[f"h{li}.down.b"]) for t in range(S)])
            x = x + down
        for t in range(S):
            xf = ref_layernorm(x[t], w["lnf.g"], w["lnf.b"])
            logits[bi, t] = xf @ w["tok_emb"].T
    return logits


def ref_cross_entropy(logits, targets, ignore_index=-1):
    """Per-position -log softmax[target], averaged over unmasked positions."""
    logits = np.atleast_3d(logits)
    targets = np.atleast_2d(targets)
    losses = []
    for bi in range(targets.shape[0]):
        for t in range(targets.shape[1]):
            if targets[bi, t] == ignore_index:
                continue
            p = ref_softmax(logits[bi, t].astype(np.float64))
            losses.append(-math.log(p[targets[bi, t]]))
    return float(np.mean(losses))


def finite_difference_grad(loss_fn, tensor, indices, eps=1e-3):
    """Central finite differences of loss_fn at the given flat indices of
    tensor (modified in place and restored)."""
    flat = tensor.reshape(-1)
    grads = []
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + eps
        up = loss_fn()
        flat[idx] = orig - eps
        down = loss_fn()
        flat[idx] = orig
        grads.append((up - down) / (2 * eps))
    return np.array(grads)


def ref_f1_scores(confusion: dict, labels: list[str]):
    """Precision/recall/F1 from a confusion mapping expected->predicted->count."""
    out = {}
    for label in labels:
        tp = confusion.get(label, {}).get(label, 0)
        fn = sum(confusion.get(label, {}).values()) - tp
        fp = sum(row.get(label, 0) for exp, row in confusion.items() if exp != label)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        out[label] = (p, r, f1)
    return out


def ref_dequantize(values, bits, block_size):
    """Independent per-block affine quantization round trip."""
    flat = np.asarray(values, dtype=np.float32).reshape(-1)
    levels = (1 << bits) - 1
    out = np.empty_like(flat)
    scales = []
    for start in range(0, flat.size, block_size):
        block = flat[start : start + block_size]
        lo, hi = float(block.min()), float(block.max())
        scale = (hi - lo) / levels if hi > lo else 1.0
        codes = np.clip(np.round((block - lo) / scale), 0, levels)
        out[start : start + block_size] = lo + codes * scale
        scales.append(scale)
    return out.reshape(np.shape(values)), np.array(scales)
