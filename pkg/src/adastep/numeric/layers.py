"""Neural building blocks shared by the denoiser and the step selector.

Every function accepts either plain arrays (inference) or :class:`Var`
leaves (training), so a model's forward pass is written once.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import d_softmax, value_of


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis of a finite array."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"softmax input must be finite, got {z!r}")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def affine(x, weight, bias=None):
    out = x @ weight
    return out if bias is None else out + bias


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in))


def init_attention(rng: np.random.Generator, dim: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.wq": init_dense(rng, dim, dim),
        f"{prefix}.wk": init_dense(rng, dim, dim),
        f"{prefix}.wv": init_dense(rng, dim, dim),
        f"{prefix}.wo": init_dense(rng, dim, dim, gain=0.5),
    }


def self_attention_block(tokens, params, prefix: str = "attn", mask: np.ndarray | None = None):
    """Single-head scaled dot-product self-attention with a residual path.

    ``tokens`` is ``(L, d)`` or batched ``(B, L, d)``; ``mask`` is ``(B, L)``
    with True for real tokens. Padded keys receive zero attention weight, so
    results for the real tokens do not depend on padding.
    """
    wq, wk, wv, wo = (params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    shape = value_of(tokens).shape
    if len(shape) not in (2, 3) or shape[-2] < 1:
        raise ValueError(f"tokens must be (L, d) or (B, L, d) with L >= 1, got {shape}")
    d = shape[-1]
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if value_of(w).shape != (d, d):
            raise ValueError(f"{prefix}.{name} must be ({d}, {d}), got {value_of(w).shape}")
    q = tokens @ wq
    k = tokens @ wk
    v = tokens @ wv
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    key_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape[:-1]:
            raise ValueError(f"mask shape {mask.shape} does not match tokens {shape[:-1]}")
        key_mask = mask[..., None, :]
    weights = d_softmax(scores, axis=-1, mask=key_mask)
    return tokens + (weights @ v) @ wo


def masked_mean(tokens, mask: np.ndarray | None = None):
    """Mean over the token axis, ignoring padded positions."""
    if mask is None:
        return tokens.mean(axis=-2)
    mask = np.asarray(mask, dtype=np.float64)
    weights = mask / mask.sum(axis=-1, keepdims=True)
    # (B, 1, L) @ (B, L, d) -> (B, 1, d)
    pooled = weights[:, None, :] @ tokens
    return pooled.reshape(pooled.shape[0], pooled.shape[-1])
