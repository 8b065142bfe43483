"""Feature consolidation: repair a pruned query feature from gallery neighbors.

The query's class vector is averaged with its k nearest gallery neighbors'
class vectors, concatenated with the query's surviving patch tokens and every
neighbor's full patch block, and passed through a single pre-norm transformer
layer. Only the output at position 0 (the averaged class slot) is consumed.
No positional encoding is added inside the decoder, so the result is
equivariant to neighbor-block order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncodedFeature, LayerWeights, _gelu
from .exceptions import ShapeError
from .gallery import GalleryRecord
from .kernels import (
    AttentionWeights,
    layer_norm,
    matmul,
    multi_head_attention,
    softmax_rows,
)

__all__ = [
    "MultiViewFeature",
    "DecoderWeights",
    "DecompositionReport",
    "assemble_multiview",
    "init_decoder_weights",
    "decode",
    "decompose_cls_attention",
]


@dataclass
class MultiViewFeature:
    """Averaged class vector plus query and neighbor patch blocks.

    ``block_offsets`` lists half-open token ranges in layout order:
    the class slot, the query block, then one range per neighbor block.
    """

    mean_cls: np.ndarray
    query_patches: np.ndarray
    neighbor_blocks: list[np.ndarray] = field(default_factory=list)

    @property
    def block_offsets(self) -> list[tuple[int, int]]:
        offsets = [(0, 1)]
        start = 1
        for block in [self.query_patches, *self.neighbor_blocks]:
            offsets.append((start, start + block.shape[0]))
            start += block.shape[0]
        return offsets

    @property
    def total_tokens(self) -> int:
        return 1 + self.query_patches.shape[0] + sum(b.shape[0] for b in self.neighbor_blocks)

    def tokens(self) -> np.ndarray:
        parts = [self.mean_cls[None, :], self.query_patches, *self.neighbor_blocks]
        return np.concatenate([p for p in parts if p.shape[0] > 0], axis=0)


@dataclass
class DecoderWeights:
    heads: int
    layer: LayerWeights
    final_gain: np.ndarray
    final_bias: np.ndarray


@dataclass
class DecompositionReport:
    """Three-way split of the cls attention output by source block.

    ``term_c + term_q + term_g`` reproduces the undecomposed cls attention
    output (the pre-projection head concatenation). ``attention_mass`` holds
    the head-averaged probability mass on the class slot, the query block,
    and each neighbor block; the masses sum to 1.
    """

    term_c: np.ndarray
    term_q: np.ndarray
    term_g: np.ndarray
    mass_c: float
    mass_q: float
    neighbor_masses: list[float]

    @property
    def attention_mass(self) -> tuple[float, float, list[float]]:
        return self.mass_c, self.mass_q, self.neighbor_masses


def assemble_multiview(
    query: EncodedFeature, neighbors: list[GalleryRecord]
) -> MultiViewFeature:
    """Average class vectors and lay out patch blocks in rank order."""
    dim = query.cls.shape[0]
    for i, rec in enumerate(neighbors):
        if rec.cls.shape[0] != dim or rec.patches.shape[1] != dim:
            raise ShapeError(f"neighbor {i} dimension does not match query dim {dim}")
    cls_stack = np.stack([query.cls, *[rec.cls for rec in neighbors]])
    mean_cls = cls_stack.mean(axis=0)
    return MultiViewFeature(
        mean_cls=mean_cls.astype(query.cls.dtype),
        query_patches=query.patches,
        neighbor_blocks=[rec.patches for rec in neighbors],
    )


def init_decoder_weights(
    embed_dim: int, mlp_dim: int, heads: int, seed: int
) -> DecoderWeights:
    """Seed-deterministic single-layer decoder initialization."""
    rng = np.random.default_rng(seed)
    d = embed_dim
    proj_std = 1.0 / math.sqrt(d)

    def gauss(shape):
        return rng.normal(0.0, proj_std, size=shape).astype(np.float32)

    attn = AttentionWeights(
        wq=gauss((d, d)),
        bq=np.zeros(d, dtype=np.float32),
        wk=gauss((d, d)),
        bk=np.zeros(d, dtype=np.float32),
        wv=gauss((d, d)),
        bv=np.zeros(d, dtype=np.float32),
        wo=gauss((d, d)),
        bo=np.zeros(d, dtype=np.float32),
    )
    layer = LayerWeights(
        ln1_gain=np.ones(d, dtype=np.float32),
        ln1_bias=np.zeros(d, dtype=np.float32),
        attn=attn,
        ln2_gain=np.ones(d, dtype=np.float32),
        ln2_bias=np.zeros(d, dtype=np.float32),
        fc1_w=gauss((d, mlp_dim)),
        fc1_b=np.zeros(mlp_dim, dtype=np.float32),
        fc2_w=gauss((mlp_dim, d)),
        fc2_b=np.zeros(d, dtype=np.float32),
    )
    return DecoderWeights(
        heads=heads,
        layer=layer,
        final_gain=np.ones(d, dtype=np.float32),
        final_bias=np.zeros(d, dtype=np.float32),
    )


def _cls_attention_pieces(
    f_m: MultiViewFeature, w: DecoderWeights
) -> tuple[np.ndarray, np.ndarray]:
    """Per-head cls attention rows and per-head values on normalized tokens.

    Returns ``(attn_rows, values)`` with shapes (H, T) and (H, T, dh).
    """
    tokens = f_m.tokens()
    t, dim = tokens.shape
    if dim % w.heads != 0:
        raise ShapeError(f"token dimension {dim} not divisible by {w.heads} heads")
    head_dim = dim // w.heads
    lw = w.layer
    h = layer_norm(tokens, lw.ln1_gain, lw.ln1_bias)
    q = (matmul(h, lw.attn.wq) + lw.attn.bq).reshape(t, w.heads, head_dim)
    k = (matmul(h, lw.attn.wk) + lw.attn.bk).reshape(t, w.heads, head_dim)
    v = (matmul(h, lw.attn.wv) + lw.attn.bv).reshape(t, w.heads, head_dim)
    scores = np.einsum("hd,thd->ht", q[0], k) / math.sqrt(head_dim)
    attn_rows = softmax_rows(scores)  # (H, T)
    return attn_rows, v.transpose(1, 0, 2)


def decode(f_m: MultiViewFeature, w: DecoderWeights) -> np.ndarray:
    """One pre-norm transformer layer; returns the consolidated class vector."""
    tokens = f_m.tokens()
    lw = w.layer
    att = multi_head_attention(
        layer_norm(tokens, lw.ln1_gain, lw.ln1_bias), lw.attn, w.heads
    )
    x = tokens + att.tokens_out
    h = layer_norm(x, lw.ln2_gain, lw.ln2_bias)
    x = x + matmul(_gelu(matmul(h, lw.fc1_w) + lw.fc1_b), lw.fc2_w) + lw.fc2_b
    x = layer_norm(x, w.final_gain, w.final_bias)
    return x[0].copy()


def decompose_cls_attention(f_m: MultiViewFeature, w: DecoderWeights) -> DecompositionReport:
    """Split the cls attention output by source block (class / query / neighbors).

    Terms are computed per head as attention-row times value-block, then
    concatenated across heads, so their sum equals the undecomposed cls
    attention output before the output projection.
    """
    attn_rows, values = _cls_attention_pieces(f_m, w)
    offsets = f_m.block_offsets
    c_lo, c_hi = offsets[0]
    q_lo, q_hi = offsets[1]

    def block_term(lo: int, hi: int) -> np.ndarray:
        if hi == lo:
            return np.zeros(attn_rows.shape[0] * values.shape[2], dtype=values.dtype)
        per_head = np.einsum("ht,htd->hd", attn_rows[:, lo:hi], values[:, lo:hi, :])
        return per_head.reshape(-1)

    def block_mass(lo: int, hi: int) -> float:
        if hi == lo:
            return 0.0
        return float(attn_rows[:, lo:hi].sum(axis=1).mean())

    term_c = block_term(c_lo, c_hi)
    term_q = block_term(q_lo, q_hi)
    g_lo = offsets[2][0] if len(offsets) > 2 else f_m.total_tokens
    term_g = block_term(g_lo, f_m.total_tokens)
    neighbor_masses = [block_mass(lo, hi) for lo, hi in offsets[2:]]
    return DecompositionReport(
        term_c=term_c,
        term_q=term_q,
        term_g=term_g,
        mass_c=block_mass(c_lo, c_hi),
        mass_q=block_mass(q_lo, q_hi),
        neighbor_masses=neighbor_masses,
    )
