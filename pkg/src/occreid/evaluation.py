"""Retrieval evaluation: CMC / mAP, parameter sweeps, and a synthetic fixture.

Gallery entries sharing both person id and camera id with the query are
excluded before scoring, following the usual re-identification protocol. The
synthetic generator renders each identity as a distinct color-block pattern
on the patch grid; queries get occluder rectangles and pixel noise, gallery
images stay clean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .consolidation import DecoderWeights, assemble_multiview, decode
from .encoder import EncoderConfig, EncoderWeights, encode
from .exceptions import ConfigurationError, InputError
from .gallery import GalleryMemory
from .kernels import FlopsReport
from .matching import (
    DEFAULT_ALPHA,
    DEFAULT_SHORTLIST,
    combined_distance,
    emd_distance,
    stage1_distances,
)

__all__ = [
    "EvalReport",
    "SyntheticSpec",
    "LabeledImage",
    "average_precision",
    "cmc_curve",
    "generate_synthetic",
    "evaluate",
    "sweep",
    "format_sweep_table",
    "sweep_jsonl_records",
]

SWEEP_PARAMS = ("keep_rate", "alpha", "k", "strategy")

# solid mid-gray: occluder patches share one embedding, distinct from any
# identity's colored cells
OCCLUDER_COLOR = 128.0


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    person_id: int
    camera_id: int
    source: str | None = None


@dataclass
class EvalReport:
    """Retrieval quality plus the configuration that produced it."""

    cmc: np.ndarray  # cmc[r-1] = fraction matched within rank r
    map: float
    per_query_ap: list[float]
    per_query_rank: list[int | None]
    flops: FlopsReport
    config: dict = field(default_factory=dict)

    def rank_n(self, n: int) -> float:
        return float(self.cmc[n - 1]) if len(self.cmc) >= n else float(self.cmc[-1])


@dataclass(frozen=True)
class SyntheticSpec:
    """Fixture geometry: identities on a patch grid with occluded queries."""

    identities: int = 20
    images_per_identity: int = 4
    grid_h: int = 8
    grid_w: int = 4
    cell_px: int = 8
    occlusion_rate: float = 0.4
    noise_level: float = 0.05
    seed: int = 0
    num_cameras: int = 8

    def __post_init__(self):
        if min(self.identities, self.images_per_identity, self.grid_h, self.grid_w,
               self.cell_px, self.num_cameras) < 1:
            raise ConfigurationError("all synthetic counts must be positive")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigurationError(f"occlusion rate {self.occlusion_rate} outside [0, 1]")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigurationError(f"noise level {self.noise_level} outside [0, 1]")

    @property
    def image_h(self) -> int:
        return self.grid_h * self.cell_px

    @property
    def image_w(self) -> int:
        return self.grid_w * self.cell_px


def average_precision(
    ranked_pids: np.ndarray,
    ranked_camids: np.ndarray,
    query_pid: int,
    query_camid: int,
) -> float | None:
    """AP of one filtered ranking; None when no valid relevant entry exists.

    Entries sharing both the query's person id and camera id are removed
    before scoring.
    """
    ranked_pids = np.asarray(ranked_pids)
    ranked_camids = np.asarray(ranked_camids)
    junk = (ranked_pids == query_pid) & (ranked_camids == query_camid)
    pids = ranked_pids[~junk]
    relevant = pids == query_pid
    total = int(relevant.sum())
    if total == 0:
        return None
    hits = np.cumsum(relevant)
    precision_at_hit = hits[relevant] / (np.flatnonzero(relevant) + 1)
    return float(precision_at_hit.sum() / total)


def first_match_rank(
    ranked_pids: np.ndarray,
    ranked_camids: np.ndarray,
    query_pid: int,
    query_camid: int,
) -> int | None:
    """1-based rank of the first correct match in the filtered ranking."""
    ranked_pids = np.asarray(ranked_pids)
    ranked_camids = np.asarray(ranked_camids)
    junk = (ranked_pids == query_pid) & (ranked_camids == query_camid)
    pids = ranked_pids[~junk]
    hits = np.flatnonzero(pids == query_pid)
    if hits.size == 0:
        return None
    return int(hits[0]) + 1


def cmc_curve(first_match_ranks: list[int | None], max_rank: int) -> np.ndarray:
    """cmc[r-1] = fraction of queries whose first match falls within rank r."""
    valid = [r for r in first_match_ranks if r is not None]
    if not valid:
        raise InputError("no valid queries for a CMC curve")
    curve = np.zeros(max_rank, dtype=np.float64)
    for r in valid:
        if r <= max_rank:
            curve[r - 1] += 1.0
    return np.cumsum(curve) / len(valid)


def _hue_to_rgb(hue: float) -> np.ndarray:
    """Fully saturated RGB for a hue in [0, 1)."""
    h = (hue % 1.0) * 6.0
    x = 1.0 - abs(h % 2.0 - 1.0)
    segments = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)]
    return np.array(segments[int(h) % 6], dtype=np.float64)


def _identity_pattern(pid: int, rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Identity-specific base color plus per-cell jitter, at pixel resolution.

    Base colors step around the hue wheel by the golden ratio, so any two
    identities have well-separated image means; the per-cell jitter makes
    individual patches identity-specific so patch-level matching has signal
    too.
    """
    base = 40.0 + 175.0 * _hue_to_rgb(pid * 0.6180339887498949)
    jitter = rng.uniform(-60.0, 60.0, size=(spec.grid_h, spec.grid_w, 3))
    cells = np.clip(base + jitter, 0, 255).astype(np.uint8)
    return np.repeat(np.repeat(cells, spec.cell_px, axis=0), spec.cell_px, axis=1)


def _occlusion_cells(
    rng: np.random.Generator, spec: SyntheticSpec
) -> np.ndarray:
    """Boolean grid with exactly round(rate * cells) occluded cells.

    A full rectangle is placed first; any remainder extends it by a partial
    strip, so the occluded region stays contiguous.
    """
    total_cells = spec.grid_h * spec.grid_w
    target = int(round(spec.occlusion_rate * total_cells))
    mask = np.zeros((spec.grid_h, spec.grid_w), dtype=bool)
    if target == 0:
        return mask
    width = int(rng.integers(1, spec.grid_w + 1))
    width = min(width, spec.grid_w)
    full_rows = min(target // width, spec.grid_h)
    rem = target - full_rows * width
    if full_rows + (1 if rem else 0) > spec.grid_h:
        width = math.ceil(target / spec.grid_h)
        full_rows = min(target // width, spec.grid_h)
        rem = target - full_rows * width
    top = int(rng.integers(0, spec.grid_h - full_rows - (1 if rem else 0) + 1))
    left = int(rng.integers(0, spec.grid_w - width + 1))
    mask[top : top + full_rows, left : left + width] = True
    if rem:
        mask[top + full_rows, left : left + rem] = True
    return mask


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Seed-deterministic (queries, gallery) corpora.

    Gallery images are the identity's clean pattern; every query is the same
    pattern under solid-gray occluder rectangles plus pixel noise. Gallery
    cameras cycle over all but the last camera id, which is reserved for
    queries, so a query never shares a camera with a gallery entry.
    """
    rng = np.random.default_rng(spec.seed)
    gallery_cams = max(spec.num_cameras - 1, 1)
    query_cam = spec.num_cameras - 1
    queries: list[LabeledImage] = []
    gallery: list[LabeledImage] = []
    for pid in range(spec.identities):
        base = _identity_pattern(pid, rng, spec)
        for j in range(spec.images_per_identity):
            gallery.append(
                LabeledImage(pixels=base.copy(), person_id=pid, camera_id=j % gallery_cams)
            )
        for _ in range(spec.images_per_identity):
            img = base.astype(np.float64)
            cells = _occlusion_cells(rng, spec)
            pix_mask = np.repeat(
                np.repeat(cells, spec.cell_px, axis=0), spec.cell_px, axis=1
            )
            img[pix_mask] = OCCLUDER_COLOR
            if spec.noise_level > 0.0:
                img += rng.normal(0.0, spec.noise_level * 255.0, size=img.shape)
            queries.append(
                LabeledImage(
                    pixels=np.clip(img, 0, 255).astype(np.uint8),
                    person_id=pid,
                    camera_id=query_cam,
                )
            )
    return queries, gallery


def full_ranking(
    query_feat,
    memory: GalleryMemory,
    alpha: float,
    shortlist: int,
    k: int,
    consolidate: bool = False,
    decoder_weights: DecoderWeights | None = None,
) -> np.ndarray:
    """Deterministic total order over the whole gallery for one query.

    The top-k (combined distance, optionally re-scored through the
    consolidation decoder) comes first, then the rest of the shortlist in
    combined order, then the remaining gallery in cosine order.
    """
    d_cos = stage1_distances(query_feat, memory)
    order_cos = np.argsort(d_cos, kind="stable")
    shortlist = min(shortlist, len(memory))
    k = min(k, shortlist)
    short_idx = order_cos[:shortlist]

    d_comb = []
    for pos in short_idx:
        d_emd = emd_distance(query_feat.patches, memory.records[pos].patches)
        d_comb.append(combined_distance(float(d_cos[pos]), d_emd, alpha))
    comb_order = np.lexsort((short_idx, np.asarray(d_comb)))
    shortlist_ranked = short_idx[comb_order]

    top = shortlist_ranked[:k]
    if consolidate and k > 0:
        if decoder_weights is None:
            raise InputError("consolidation requested without decoder weights")
        neighbors = [memory.records[p] for p in top]
        consolidated = decode(assemble_multiview(query_feat, neighbors), decoder_weights)
        nc = np.linalg.norm(consolidated)
        re_scores = []
        for p in top:
            cls = memory.records[p].cls.astype(np.float64)
            ng = np.linalg.norm(cls)
            denom = (nc * ng) if nc > 0 and ng > 0 else 1.0
            re_scores.append(1.0 - float(consolidated @ cls) / denom)
        top = top[np.lexsort((top, np.asarray(re_scores)))]

    rest_short = shortlist_ranked[k:]
    in_short = np.zeros(len(memory), dtype=bool)
    in_short[short_idx] = True
    rest = order_cos[~in_short[order_cos]]
    return np.concatenate([top, rest_short, rest])


def evaluate(
    queries: list[LabeledImage],
    memory: GalleryMemory,
    cfg: EncoderConfig,
    weights: EncoderWeights,
    alpha: float = DEFAULT_ALPHA,
    k: int = 10,
    strategy: str | None = None,
    consolidate: bool = False,
    decoder_weights: DecoderWeights | None = None,
    shortlist: int = DEFAULT_SHORTLIST,
    max_rank: int = 10,
) -> EvalReport:
    """Run the full pipeline for every query and score the rankings."""
    if not queries or len(memory) == 0:
        raise InputError("evaluate needs nonempty queries and gallery memory")
    if strategy is not None:
        cfg = replace(cfg, drop_strategy=strategy)

    pids = memory.person_ids()
    camids = memory.camera_ids()
    aps: list[float] = []
    ranks: list[int | None] = []
    flops = None
    for q in queries:
        feat = encode(q.pixels, q.camera_id, cfg, weights)
        if flops is None:
            flops = feat.flops
        order = full_ranking(feat, memory, alpha, shortlist, k, consolidate, decoder_weights)
        ap = average_precision(pids[order], camids[order], q.person_id, q.camera_id)
        if ap is None:
            continue
        aps.append(ap)
        ranks.append(first_match_rank(pids[order], camids[order], q.person_id, q.camera_id))
    if not aps:
        raise InputError("no query had a valid relevant gallery entry")
    cmc = cmc_curve(ranks, max_rank)
    return EvalReport(
        cmc=cmc,
        map=float(np.mean(aps)),
        per_query_ap=aps,
        per_query_rank=ranks,
        flops=flops,
        config={
            "keep_rate": cfg.keep_rate,
            "alpha": alpha,
            "k": k,
            "strategy": cfg.drop_strategy,
            "consolidate": consolidate,
        },
    )


def sweep(
    param: str,
    values: list,
    queries: list[LabeledImage],
    memory: GalleryMemory,
    cfg: EncoderConfig,
    weights: EncoderWeights,
    alpha: float = DEFAULT_ALPHA,
    k: int = 10,
    consolidate: bool = False,
    decoder_weights: DecoderWeights | None = None,
    shortlist: int = DEFAULT_SHORTLIST,
) -> list[tuple[object, EvalReport]]:
    """One evaluate run per value over a shared fixture and weight set."""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"unknown sweep parameter {param!r}; expected {SWEEP_PARAMS}")
    if not values:
        raise InputError("sweep needs a nonempty value list")
    rows = []
    for value in values:
        run_cfg = cfg
        run_alpha, run_k, run_strategy = alpha, k, None
        if param == "keep_rate":
            run_cfg = replace(cfg, keep_rate=float(value))
        elif param == "alpha":
            run_alpha = float(value)
        elif param == "k":
            run_k = int(value)
        elif param == "strategy":
            run_strategy = str(value)
        report = evaluate(
            queries,
            memory,
            run_cfg,
            weights,
            alpha=run_alpha,
            k=run_k,
            strategy=run_strategy,
            consolidate=consolidate,
            decoder_weights=decoder_weights,
            shortlist=shortlist,
        )
        rows.append((value, report))
    return rows


def format_sweep_table(param: str, rows: list[tuple[object, EvalReport]]) -> str:
    """Aligned plain-text sweep table; keep-rate sweeps add a FLOPs ratio."""
    include_flops = param == "keep_rate"
    header = f"{param:>10} {'rank1':>8} {'rank5':>8} {'rank10':>8} {'mAP':>8}"
    if include_flops:
        header += f" {'flops':>14} {'ratio':>7}"
    lines = [header]
    baseline = None
    if include_flops and rows:
        baseline = max(r.flops.total for _, r in rows)
    for value, report in rows:
        line = (
            f"{value!s:>10} {report.rank_n(1):8.4f} {report.rank_n(5):8.4f} "
            f"{report.rank_n(10):8.4f} {report.map:8.4f}"
        )
        if include_flops:
            ratio = report.flops.total / baseline if baseline else 0.0
            line += f" {report.flops.total:14d} {ratio:7.4f}"
        lines.append(line)
    return "\n".join(lines)


def sweep_jsonl_records(param: str, rows: list[tuple[object, EvalReport]]) -> list[str]:
    """One JSON record per sweep point."""
    records = []
    for value, report in rows:
        records.append(
            json.dumps(
                {
                    "param": param,
                    "value": value,
                    "rank1": report.rank_n(1),
                    "rank5": report.rank_n(5),
                    "rank10": report.rank_n(10),
                    "map": report.map,
                    "flops": report.flops.total,
                    "config": report.config,
                },
                sort_keys=True,
            )
        )
    return records
