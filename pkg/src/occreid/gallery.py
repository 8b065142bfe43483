"""Persistent gallery memory: full-token features for every gallery image.

Gallery images are always encoded densely (keep rate forced to 1.0) so that
pruned query features can be matched against holistic gallery features. The
on-disk format is a little-endian binary file:

    magic "FPCG" | u32 version=1 | u32 D | u32 N | u32 record_count
    per record: u32 person_id | u32 camera_id | D f32 cls | N*D f32 patches
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderWeights, encode
from .exceptions import FormatError, InputError

__all__ = ["GalleryRecord", "GalleryMemory", "build_gallery", "save_gallery", "load_gallery"]

GALLERY_MAGIC = b"FPCG"
GALLERY_VERSION = 1


@dataclass
class GalleryRecord:
    person_id: int
    camera_id: int
    cls: np.ndarray
    patches: np.ndarray


@dataclass
class GalleryMemory:
    """Ordered, immutable-by-convention store of gallery records."""

    dim: int
    patch_count: int
    records: list[GalleryRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def index(self) -> dict[int, list[int]]:
        """person_id -> record positions, in record order."""
        idx: dict[int, list[int]] = {}
        for pos, rec in enumerate(self.records):
            idx.setdefault(rec.person_id, []).append(pos)
        return idx

    def cls_matrix(self) -> np.ndarray:
        """(record_count, D) matrix of class vectors, in record order."""
        if not self.records:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([r.cls for r in self.records])

    def person_ids(self) -> np.ndarray:
        return np.array([r.person_id for r in self.records], dtype=np.int64)

    def camera_ids(self) -> np.ndarray:
        return np.array([r.camera_id for r in self.records], dtype=np.int64)


def build_gallery(
    images_with_metadata,
    cfg: EncoderConfig,
    w: EncoderWeights,
) -> GalleryMemory:
    """Encode ``(image, person_id, camera_id)`` triples densely, in order."""
    dense_cfg = cfg.dense()
    expected = (cfg.image_h, cfg.image_w, cfg.channels)
    records = []
    for i, (image, person_id, camera_id) in enumerate(images_with_metadata):
        image = np.asarray(image)
        if image.shape != expected:
            raise InputError(
                f"gallery image {i} has shape {image.shape}, expected {expected}"
            )
        feat = encode(image, camera_id, dense_cfg, w)
        records.append(
            GalleryRecord(
                person_id=int(person_id),
                camera_id=int(camera_id),
                cls=feat.cls,
                patches=feat.patches,
            )
        )
    return GalleryMemory(dim=cfg.embed_dim, patch_count=cfg.num_patches, records=records)


def save_gallery(memory: GalleryMemory, path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(GALLERY_MAGIC)
        fh.write(
            struct.pack(
                "<IIII", GALLERY_VERSION, memory.dim, memory.patch_count, len(memory.records)
            )
        )
        for rec in memory.records:
            fh.write(struct.pack("<II", rec.person_id, rec.camera_id))
            fh.write(np.ascontiguousarray(rec.cls, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.patches, dtype="<f4").tobytes())


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated gallery file while reading {what}", offset + len(data))
    return data


def load_gallery(path) -> GalleryMemory:
    path = Path(path)
    with path.open("rb") as fh:
        offset = 0
        magic = _read_exact(fh, 4, offset, "magic")
        if magic != GALLERY_MAGIC:
            raise FormatError(
                f"bad gallery magic {magic!r}, expected {GALLERY_MAGIC!r}", offset
            )
        offset += 4
        header = _read_exact(fh, 16, offset, "header")
        version, dim, patch_count, record_count = struct.unpack("<IIII", header)
        if version != GALLERY_VERSION:
            raise FormatError(f"unsupported gallery version {version}", offset)
        offset += 16

        records = []
        cls_bytes = dim * 4
        patch_bytes = patch_count * dim * 4
        for i in range(record_count):
            ids = _read_exact(fh, 8, offset, f"record {i} ids")
            person_id, camera_id = struct.unpack("<II", ids)
            offset += 8
            cls = np.frombuffer(
                _read_exact(fh, cls_bytes, offset, f"record {i} cls"), dtype="<f4"
            ).copy()
            offset += cls_bytes
            patches = (
                np.frombuffer(
                    _read_exact(fh, patch_bytes, offset, f"record {i} patches"), dtype="<f4"
                )
                .reshape(patch_count, dim)
                .copy()
            )
            offset += patch_bytes
            records.append(
                GalleryRecord(
                    person_id=person_id, camera_id=camera_id, cls=cls, patches=patches
                )
            )
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final record", offset)
    return GalleryMemory(dim=dim, patch_count=patch_count, records=records)
