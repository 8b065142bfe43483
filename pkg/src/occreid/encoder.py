"""Vision-transformer encoder with attention-driven token pruning.

Images are cut into overlapping patches, linearly embedded, and tagged with
positional and per-camera encodings. A stack of pre-norm transformer blocks
follows; designated blocks drop the least class-attended patch tokens between
their attention and MLP sublayers, so every later sublayer runs on the
reduced sequence. The class token is never dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigurationError, InputError, ShapeError
from .kernels import (
    AttentionOutput,
    AttentionWeights,
    FlopsReport,
    count_flops,
    layer_norm,
    matmul,
    multi_head_attention,
)

__all__ = [
    "DROP_STRATEGIES",
    "EncoderConfig",
    "EncoderWeights",
    "LayerWeights",
    "TokenSequence",
    "EncodedFeature",
    "embed_image",
    "mean_cls_attention",
    "select_kept",
    "encode",
    "init_weights",
    "encoder_flops",
]

DROP_STRATEGIES = ("non_salient", "random", "salient")


@dataclass(frozen=True)
class EncoderConfig:
    """Static encoder geometry and pruning policy.

    ``sparsify_layers`` holds 0-based block indices; pruning happens inside
    those blocks, between attention and MLP. ``keep_rate`` is the fraction of
    patch tokens surviving each pruning stage.
    """

    image_h: int = 256
    image_w: int = 128
    channels: int = 3
    patch_size: int = 16
    patch_stride: int = 12
    embed_dim: int = 768
    mlp_dim: int = 3072
    layers: int = 12
    heads: int = 12
    sparsify_layers: tuple[int, ...] = (3, 6, 9)
    keep_rate: float = 0.8
    drop_strategy: str = "non_salient"
    drop_seed: int = 0
    num_cameras: int = 8
    camera_scale: float = 1.0

    def __post_init__(self):
        if self.patch_size > min(self.image_h, self.image_w):
            raise ConfigurationError(
                f"patch size {self.patch_size} exceeds image {self.image_h}x{self.image_w}"
            )
        if self.patch_stride < 1:
            raise ConfigurationError(f"patch stride must be positive, got {self.patch_stride}")
        if not 0.0 < self.keep_rate <= 1.0:
            raise ConfigurationError(f"keep rate must lie in (0, 1], got {self.keep_rate}")
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if any(not 0 <= s < self.layers for s in self.sparsify_layers):
            raise ConfigurationError(
                f"sparsify layers {self.sparsify_layers} outside [0, {self.layers})"
            )
        if self.drop_strategy not in DROP_STRATEGIES:
            raise ConfigurationError(
                f"unknown drop strategy {self.drop_strategy!r}; expected one of {DROP_STRATEGIES}"
            )
        if self.num_cameras < 1:
            raise ConfigurationError("need at least one camera")

    @property
    def grid_h(self) -> int:
        return (self.image_h - self.patch_size) // self.patch_stride + 1

    @property
    def grid_w(self) -> int:
        return (self.image_w - self.patch_size) // self.patch_stride + 1

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def dense(self) -> "EncoderConfig":
        """Copy of this config with pruning disabled."""
        return replace(self, keep_rate=1.0)


@dataclass
class LayerWeights:
    """Parameters of one pre-norm transformer block."""

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attn: AttentionWeights
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray


@dataclass
class EncoderWeights:
    patch_weight: np.ndarray  # (P*P*C, D)
    patch_bias: np.ndarray  # (D,)
    cls_token: np.ndarray  # (D,)
    positional: np.ndarray  # (N+1, D)
    camera: np.ndarray  # (num_cameras, D)
    layer_weights: list[LayerWeights]
    final_gain: np.ndarray
    final_bias: np.ndarray


@dataclass
class TokenSequence:
    """Embedded tokens; row 0 is the class token, rows 1.. are patch tokens.

    ``kept_patch_indices`` maps patch rows back to their original grid index
    and stays strictly ascending through pruning.
    """

    tokens: np.ndarray
    kept_patch_indices: np.ndarray
    camera_id: int


@dataclass
class EncodedFeature:
    """Encoder output: class vector, surviving patch tokens, pruning record."""

    cls: np.ndarray
    patches: np.ndarray
    kept_patch_indices: np.ndarray
    kept_masks: list[np.ndarray] = field(default_factory=list)
    flops: FlopsReport = field(default_factory=FlopsReport)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; keeps the package numpy-only
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def init_weights(cfg: EncoderConfig, seed: int) -> EncoderWeights:
    """Seed-deterministic initialization.

    Projections are Gaussian with std ``1/sqrt(D)``; the class token and the
    positional/camera tables use std 0.02; layer-norm gains are exactly 1 and
    all biases exactly 0. The draw order below is part of the weight-file
    contract and must not change.
    """
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    proj_std = 1.0 / math.sqrt(d)

    def gauss(shape, std):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    cls_token = gauss((d,), 0.02)
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    patch_weight = gauss((patch_dim, d), proj_std)
    patch_bias = np.zeros(d, dtype=np.float32)
    positional = gauss((cfg.num_patches + 1, d), 0.02)
    camera = gauss((cfg.num_cameras, d), 0.02)

    layers = []
    for _ in range(cfg.layers):
        attn = AttentionWeights(
            wq=gauss((d, d), proj_std),
            bq=np.zeros(d, dtype=np.float32),
            wk=gauss((d, d), proj_std),
            bk=np.zeros(d, dtype=np.float32),
            wv=gauss((d, d), proj_std),
            bv=np.zeros(d, dtype=np.float32),
            wo=gauss((d, d), proj_std),
            bo=np.zeros(d, dtype=np.float32),
        )
        layers.append(
            LayerWeights(
                ln1_gain=np.ones(d, dtype=np.float32),
                ln1_bias=np.zeros(d, dtype=np.float32),
                attn=attn,
                ln2_gain=np.ones(d, dtype=np.float32),
                ln2_bias=np.zeros(d, dtype=np.float32),
                fc1_w=gauss((d, cfg.mlp_dim), proj_std),
                fc1_b=np.zeros(cfg.mlp_dim, dtype=np.float32),
                fc2_w=gauss((cfg.mlp_dim, d), proj_std),
                fc2_b=np.zeros(d, dtype=np.float32),
            )
        )
    return EncoderWeights(
        patch_weight=patch_weight,
        patch_bias=patch_bias,
        cls_token=cls_token,
        positional=positional,
        camera=camera,
        layer_weights=layers,
        final_gain=np.ones(d, dtype=np.float32),
        final_bias=np.zeros(d, dtype=np.float32),
    )


def _as_float_image(image: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    image = np.asarray(image)
    expected = (cfg.image_h, cfg.image_w, cfg.channels)
    if image.shape != expected:
        raise ShapeError(f"image shape {image.shape} does not match config {expected}")
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def extract_patches(image: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Flattened overlapping patches in row-major grid order, (N, P*P*C)."""
    p, s = cfg.patch_size, cfg.patch_stride
    rows = []
    for gy in range(cfg.grid_h):
        for gx in range(cfg.grid_w):
            patch = image[gy * s : gy * s + p, gx * s : gx * s + p, :]
            rows.append(patch.reshape(-1))
    return np.stack(rows)


def embed_image(
    image: np.ndarray,
    camera_id: int,
    cfg: EncoderConfig,
    w: EncoderWeights,
) -> TokenSequence:
    """Patch-embed an image and add positional plus scaled camera encodings."""
    if not 0 <= camera_id < cfg.num_cameras:
        raise InputError(f"camera id {camera_id} out of range [0, {cfg.num_cameras})")
    pixels = _as_float_image(image, cfg)
    patches = extract_patches(pixels, cfg)
    embedded = matmul(patches, w.patch_weight) + w.patch_bias
    tokens = np.concatenate([w.cls_token[None, :], embedded], axis=0)
    tokens = tokens + w.positional
    tokens = tokens + np.float32(cfg.camera_scale) * w.camera[camera_id]
    return TokenSequence(
        tokens=tokens.astype(np.float32),
        kept_patch_indices=np.arange(cfg.num_patches, dtype=np.int64),
        camera_id=camera_id,
    )


def mean_cls_attention(att: AttentionOutput) -> np.ndarray:
    """Head-averaged cls attention over patch tokens (cls-to-cls removed)."""
    if not att.cls_attention_per_head:
        raise ShapeError("attention output carries no heads")
    mean = np.mean(np.stack(att.cls_attention_per_head), axis=0)
    return mean[1:]


def select_kept(
    scores: np.ndarray,
    keep_rate: float,
    strategy: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Indices of the tokens surviving one pruning stage, ascending.

    Keeps ``ceil(keep_rate * len(scores))`` tokens: the highest-scored ones
    for ``non_salient``, the lowest for ``salient``, or a uniform sample for
    ``random``. Score ties resolve toward the lower index.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    if n < 1:
        raise ShapeError("select_kept needs at least one score")
    k = math.ceil(keep_rate * n)
    if strategy == "non_salient":
        order = np.argsort(-scores, kind="stable")
    elif strategy == "salient":
        order = np.argsort(scores, kind="stable")
    elif strategy == "random":
        order = rng.permutation(n)
    else:
        raise ConfigurationError(f"unknown drop strategy {strategy!r}")
    return np.sort(order[:k]).astype(np.int64)


def _block_forward(
    x: np.ndarray,
    lw: LayerWeights,
    cfg: EncoderConfig,
    prune: bool,
    kept: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One pre-norm block; prunes patch tokens between attention and MLP."""
    att = multi_head_attention(layer_norm(x, lw.ln1_gain, lw.ln1_bias), lw.attn, cfg.heads)
    x = x + att.tokens_out
    if prune:
        scores = mean_cls_attention(att)
        local = select_kept(scores, cfg.keep_rate, cfg.drop_strategy, rng)
        x = x[np.concatenate(([0], local + 1))]
        kept = kept[local]
    h = layer_norm(x, lw.ln2_gain, lw.ln2_bias)
    x = x + matmul(_gelu(matmul(h, lw.fc1_w) + lw.fc1_b), lw.fc2_w) + lw.fc2_b
    return x, kept


def encode(
    image: np.ndarray,
    camera_id: int,
    cfg: EncoderConfig,
    w: EncoderWeights,
) -> EncodedFeature:
    """Run the full encoder and record per-stage keep masks and FLOPs."""
    seq = embed_image(image, camera_id, cfg, w)
    x = seq.tokens
    kept = seq.kept_patch_indices
    rng = np.random.default_rng(cfg.drop_seed)
    sparsify = set(cfg.sparsify_layers)

    token_counts: list[int] = []
    masks: list[np.ndarray] = []
    for idx, lw in enumerate(w.layer_weights):
        token_counts.append(x.shape[0])
        prune = idx in sparsify
        x, kept = _block_forward(x, lw, cfg, prune, kept, rng)
        if prune:
            mask = np.zeros(cfg.num_patches, dtype=bool)
            mask[kept] = True
            masks.append(mask)

    x = layer_norm(x, w.final_gain, w.final_bias)
    flops = count_flops(
        cfg.embed_dim, cfg.mlp_dim, token_counts, cfg.sparsify_layers, cfg.keep_rate
    )
    return EncodedFeature(
        cls=x[0].copy(),
        patches=x[1:].copy(),
        kept_patch_indices=kept.copy(),
        kept_masks=masks,
        flops=flops,
    )


def encoder_flops(cfg: EncoderConfig) -> FlopsReport:
    """Analytic FLOPs of an encoder pass, without running it."""
    counts = []
    n = cfg.num_patches
    for idx in range(cfg.layers):
        counts.append(1 + n)
        if idx in cfg.sparsify_layers:
            n = math.ceil(cfg.keep_rate * n)
    return count_flops(cfg.embed_dim, cfg.mlp_dim, counts, cfg.sparsify_layers, cfg.keep_rate)
