"""Dense numerical primitives used by the encoder and decoder.

Everything here operates on plain 2-D numpy arrays (row-major, one token per
row). Reductions go through numpy, so results are reproducible bit-for-bit at
a fixed BLAS thread count. No autodiff, no GPU paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, ShapeError

__all__ = [
    "AttentionWeights",
    "AttentionOutput",
    "FlopsReport",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "multi_head_attention",
    "count_flops",
]

LAYER_NORM_EPS = 1e-6


@dataclass
class AttentionWeights:
    """Projection set for one self-attention sublayer (all ``D x D`` + bias)."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass
class AttentionOutput:
    """Attention result plus the class-token attention row of every head.

    ``cls_attention_per_head[h]`` is row 0 of head ``h``'s post-softmax
    attention over all tokens; the cls-to-cls entry is included, so each row
    is a length-T probability vector.
    """

    tokens_out: np.ndarray
    cls_attention_per_head: list[np.ndarray]


@dataclass
class FlopsReport:
    """Analytic floating-point operation counts, one entry per layer."""

    per_layer: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.per_layer)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-subtracted for stability."""
    m = np.asarray(m)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(
    tokens: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = LAYER_NORM_EPS,
) -> np.ndarray:
    """Per-token normalization to zero mean / unit variance, then affine."""
    tokens = np.asarray(tokens)
    if gain.shape[-1] != tokens.shape[-1] or bias.shape[-1] != tokens.shape[-1]:
        raise ShapeError(
            f"layer_norm gain/bias length {gain.shape[-1]}/{bias.shape[-1]} "
            f"does not match token dimension {tokens.shape[-1]}"
        )
    mean = tokens.mean(axis=-1, keepdims=True)
    var = ((tokens - mean) ** 2).mean(axis=-1, keepdims=True)
    normed = (tokens - mean) / np.sqrt(var + eps)
    return normed * gain + bias


def multi_head_attention(
    tokens: np.ndarray,
    weights: AttentionWeights,
    heads: int,
) -> AttentionOutput:
    """Scaled dot-product self-attention with output projection.

    The scale factor uses the per-head dimension. Alongside the projected
    output it returns every head's cls attention row (row 0, all T entries).
    """
    tokens = np.asarray(tokens)
    t, dim = tokens.shape
    if dim % heads != 0:
        raise ConfigurationError(f"token dimension {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    scale = 1.0 / math.sqrt(head_dim)

    q = matmul(tokens, weights.wq) + weights.bq
    k = matmul(tokens, weights.wk) + weights.bk
    v = matmul(tokens, weights.wv) + weights.bv

    # (T, H, dh) -> (H, T, dh)
    q = q.reshape(t, heads, head_dim).transpose(1, 0, 2)
    k = k.reshape(t, heads, head_dim).transpose(1, 0, 2)
    v = v.reshape(t, heads, head_dim).transpose(1, 0, 2)

    scores = (q @ k.transpose(0, 2, 1)) * scale
    attn = softmax_rows(scores)
    combined = attn @ v  # (H, T, dh)

    out = combined.transpose(1, 0, 2).reshape(t, dim)
    out = matmul(out, weights.wo) + weights.bo
    cls_rows = [attn[h, 0].copy() for h in range(heads)]
    return AttentionOutput(tokens_out=out, cls_attention_per_head=cls_rows)


def count_flops(
    embed_dim: int,
    mlp_dim: int,
    token_counts: list[int],
    sparsify_layers: tuple[int, ...] = (),
    keep_rate: float = 1.0,
) -> FlopsReport:
    """Analytic per-layer FLOPs for a transformer stack.

    ``token_counts[l]`` is the token count entering layer ``l``. Per layer the
    count covers QKV projections (``3*T*D^2`` MACs), attention scores and
    apply (``2*T^2*D``), the output projection (``T*D^2``) and the MLP
    (``2*T*D*D_mlp``), at 2 FLOPs per multiply-accumulate. Softmax and
    normalization terms are dominated and ignored.

    Layers listed in ``sparsify_layers`` drop tokens between attention and
    MLP, so their MLP term runs at the post-pruning count
    ``1 + ceil(keep_rate * (T - 1))``.
    """
    d = embed_dim
    sparsify = set(sparsify_layers)
    per_layer: list[int] = []
    for idx, t in enumerate(token_counts):
        if t == 0:
            per_layer.append(0)
            continue
        attn_macs = 4 * t * d * d + 2 * t * t * d
        t_mlp = t
        if idx in sparsify:
            t_mlp = 1 + math.ceil(keep_rate * (t - 1))
        mlp_macs = 2 * t_mlp * d * mlp_dim
        per_layer.append(2 * (attn_macs + mlp_macs))
    return FlopsReport(per_layer=per_layer)
