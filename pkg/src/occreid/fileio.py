"""File formats: FPCW weight files, P6 PPM images, filename metadata.

The weight file is little-endian binary:

    magic "FPCW" | u32 version=1 | u32 tensor_count
    per tensor: u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | f32 data

A model (encoder + decoder + classifier) is stored as named tensors plus a
small "config" vector holding the encoder geometry, so a weight file is
self-describing. Keep rate, drop strategy and seeds are runtime flags and are
not persisted.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .consolidation import DecoderWeights
from .encoder import EncoderConfig, EncoderWeights, LayerWeights
from .exceptions import FormatError, InputError
from .kernels import AttentionWeights
from .losses import Classifier

__all__ = [
    "save_weight_file",
    "load_weight_file",
    "model_to_tensors",
    "tensors_to_model",
    "save_model",
    "load_model",
    "load_ppm",
    "save_ppm",
    "bilinear_resize",
    "load_image",
    "parse_metadata",
]

WEIGHT_MAGIC = b"FPCW"
WEIGHT_VERSION = 1

_METADATA_RE = re.compile(r"^(\d+)_c(\d+)")


# --- FPCW container ---------------------------------------------------------


def save_weight_file(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_VERSION, len(tensors)))
        for name, tensor in tensors.items():
            arr = np.ascontiguousarray(tensor, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated weight file while reading {what}", offset + len(data))
    return data


def load_weight_file(path) -> dict[str, np.ndarray]:
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    with path.open("rb") as fh:
        offset = 0
        magic = _read_exact(fh, 4, offset, "magic")
        if magic != WEIGHT_MAGIC:
            raise FormatError(f"bad weight magic {magic!r}, expected {WEIGHT_MAGIC!r}", offset)
        offset += 4
        version, count = struct.unpack("<II", _read_exact(fh, 8, offset, "header"))
        if version != WEIGHT_VERSION:
            raise FormatError(f"unsupported weight version {version}", offset)
        offset += 8
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, offset, f"tensor {i} name length"))
            offset += 4
            name = _read_exact(fh, name_len, offset, f"tensor {i} name").decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, offset, f"{name} rank"))
            offset += 4
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, offset, f"{name} dims"))
            offset += 4 * rank
            n_bytes = 4 * int(np.prod(dims)) if rank else 4
            payload = _read_exact(fh, n_bytes, offset, f"{name} payload")
            offset += n_bytes
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after final tensor", offset)
    return tensors


# --- model <-> tensor dict --------------------------------------------------


def _attention_tensors(prefix: str, attn: AttentionWeights) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.wq": attn.wq, f"{prefix}.bq": attn.bq,
        f"{prefix}.wk": attn.wk, f"{prefix}.bk": attn.bk,
        f"{prefix}.wv": attn.wv, f"{prefix}.bv": attn.bv,
        f"{prefix}.wo": attn.wo, f"{prefix}.bo": attn.bo,
    }


def _layer_tensors(prefix: str, lw: LayerWeights) -> dict[str, np.ndarray]:
    out = {
        f"{prefix}.ln1.gain": lw.ln1_gain, f"{prefix}.ln1.bias": lw.ln1_bias,
        f"{prefix}.ln2.gain": lw.ln2_gain, f"{prefix}.ln2.bias": lw.ln2_bias,
        f"{prefix}.fc1.weight": lw.fc1_w, f"{prefix}.fc1.bias": lw.fc1_b,
        f"{prefix}.fc2.weight": lw.fc2_w, f"{prefix}.fc2.bias": lw.fc2_b,
    }
    out.update(_attention_tensors(f"{prefix}.attn", lw.attn))
    return out


def _attention_from(tensors: dict[str, np.ndarray], prefix: str) -> AttentionWeights:
    return AttentionWeights(
        wq=tensors[f"{prefix}.wq"], bq=tensors[f"{prefix}.bq"],
        wk=tensors[f"{prefix}.wk"], bk=tensors[f"{prefix}.bk"],
        wv=tensors[f"{prefix}.wv"], bv=tensors[f"{prefix}.bv"],
        wo=tensors[f"{prefix}.wo"], bo=tensors[f"{prefix}.bo"],
    )


def _layer_from(tensors: dict[str, np.ndarray], prefix: str) -> LayerWeights:
    return LayerWeights(
        ln1_gain=tensors[f"{prefix}.ln1.gain"], ln1_bias=tensors[f"{prefix}.ln1.bias"],
        attn=_attention_from(tensors, f"{prefix}.attn"),
        ln2_gain=tensors[f"{prefix}.ln2.gain"], ln2_bias=tensors[f"{prefix}.ln2.bias"],
        fc1_w=tensors[f"{prefix}.fc1.weight"], fc1_b=tensors[f"{prefix}.fc1.bias"],
        fc2_w=tensors[f"{prefix}.fc2.weight"], fc2_b=tensors[f"{prefix}.fc2.bias"],
    )


def model_to_tensors(
    cfg: EncoderConfig,
    encoder: EncoderWeights,
    decoder: DecoderWeights,
    classifier: Classifier,
) -> dict[str, np.ndarray]:
    config_vec = np.array(
        [
            cfg.image_h, cfg.image_w, cfg.channels, cfg.patch_size, cfg.patch_stride,
            cfg.embed_dim, cfg.mlp_dim, cfg.layers, cfg.heads, cfg.num_cameras,
            cfg.camera_scale, len(cfg.sparsify_layers), *cfg.sparsify_layers,
        ],
        dtype=np.float32,
    )
    tensors: dict[str, np.ndarray] = {"config": config_vec}
    tensors["encoder.cls"] = encoder.cls_token
    tensors["encoder.patch.weight"] = encoder.patch_weight
    tensors["encoder.patch.bias"] = encoder.patch_bias
    tensors["encoder.pos"] = encoder.positional
    tensors["encoder.cam"] = encoder.camera
    for i, lw in enumerate(encoder.layer_weights):
        tensors.update(_layer_tensors(f"encoder.layers.{i}", lw))
    tensors["encoder.final.gain"] = encoder.final_gain
    tensors["encoder.final.bias"] = encoder.final_bias
    tensors.update(_layer_tensors("decoder.layer", decoder.layer))
    tensors["decoder.final.gain"] = decoder.final_gain
    tensors["decoder.final.bias"] = decoder.final_bias
    tensors["classifier.weight"] = classifier.weight
    tensors["classifier.bias"] = classifier.bias
    return tensors


def tensors_to_model(
    tensors: dict[str, np.ndarray],
) -> tuple[EncoderConfig, EncoderWeights, DecoderWeights, Classifier]:
    try:
        vec = tensors["config"]
        n_sparsify = int(vec[11])
        cfg = EncoderConfig(
            image_h=int(vec[0]), image_w=int(vec[1]), channels=int(vec[2]),
            patch_size=int(vec[3]), patch_stride=int(vec[4]),
            embed_dim=int(vec[5]), mlp_dim=int(vec[6]),
            layers=int(vec[7]), heads=int(vec[8]),
            num_cameras=int(vec[9]), camera_scale=float(vec[10]),
            sparsify_layers=tuple(int(s) for s in vec[12 : 12 + n_sparsify]),
        )
        encoder = EncoderWeights(
            patch_weight=tensors["encoder.patch.weight"],
            patch_bias=tensors["encoder.patch.bias"],
            cls_token=tensors["encoder.cls"],
            positional=tensors["encoder.pos"],
            camera=tensors["encoder.cam"],
            layer_weights=[_layer_from(tensors, f"encoder.layers.{i}") for i in range(cfg.layers)],
            final_gain=tensors["encoder.final.gain"],
            final_bias=tensors["encoder.final.bias"],
        )
        decoder = DecoderWeights(
            heads=cfg.heads,
            layer=_layer_from(tensors, "decoder.layer"),
            final_gain=tensors["decoder.final.gain"],
            final_bias=tensors["decoder.final.bias"],
        )
        classifier = Classifier(
            weight=tensors["classifier.weight"], bias=tensors["classifier.bias"]
        )
    except KeyError as exc:
        raise FormatError(f"weight file is missing tensor {exc.args[0]!r}") from exc
    return cfg, encoder, decoder, classifier


def save_model(path, cfg, encoder, decoder, classifier) -> None:
    save_weight_file(path, model_to_tensors(cfg, encoder, decoder, classifier))


def load_model(path):
    return tensors_to_model(load_weight_file(path))


# --- PPM images --------------------------------------------------------------


def _next_token(fh, offset: list[int]) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise FormatError("truncated PPM header", offset[0])
        offset[0] += 1
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
                offset[0] += 1
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_ppm(path) -> np.ndarray:
    """Binary P6 PPM with maxval 255, returned as (H, W, 3) uint8."""
    path = Path(path)
    with path.open("rb") as fh:
        offset = [0]
        magic = _next_token(fh, offset)
        if magic != b"P6":
            raise FormatError(f"unsupported PPM magic {magic!r}, expected b'P6'", 0)
        width = int(_next_token(fh, offset))
        height = int(_next_token(fh, offset))
        maxval = int(_next_token(fh, offset))
        if maxval != 255:
            raise FormatError(f"unsupported PPM maxval {maxval}", offset[0])
        payload = fh.read(width * height * 3)
        if len(payload) != width * height * 3:
            raise FormatError("truncated PPM payload", offset[0] + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def save_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise InputError(f"save_ppm expects (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping."""
    pixels = np.asarray(pixels)
    in_h, in_w = pixels.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return pixels.astype(np.uint8, copy=True)
    src = pixels.astype(np.float64)

    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def load_image(path, cfg: EncoderConfig) -> np.ndarray:
    """Load a P6 image and resize it to the configured dimensions."""
    pixels = load_ppm(path)
    return bilinear_resize(pixels, cfg.image_h, cfg.image_w)


def parse_metadata(filename) -> tuple[int, int]:
    """(person_id, 0-based camera_id) from a ``<pid>_c<camid>_...`` basename."""
    base = Path(filename).name
    match = _METADATA_RE.match(base)
    if not match:
        raise InputError(f"cannot parse person/camera ids from filename {base!r}")
    pid = int(match.group(1))
    camid = int(match.group(2))
    if camid < 1:
        raise InputError(f"camera ids in filenames are 1-based, got c{camid} in {base!r}")
    return pid, camid - 1
