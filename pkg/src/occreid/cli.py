"""Command-line surface tying the pipeline together.

Subcommands: init-weights, gen-synthetic, build-gallery, query, evaluate,
sweep, visualize-drop. All commands are deterministic for fixed flags and
seeds; errors exit nonzero with a single-line diagnostic.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .consolidation import (
    assemble_multiview,
    decode,
    decompose_cls_attention,
    init_decoder_weights,
)
from .encoder import DROP_STRATEGIES, EncoderConfig, encode, init_weights
from .evaluation import (
    LabeledImage,
    SyntheticSpec,
    evaluate,
    format_sweep_table,
    generate_synthetic,
    sweep,
    sweep_jsonl_records,
)
from .exceptions import InputError
from .fileio import load_image, load_model, parse_metadata, save_model, save_ppm
from .gallery import build_gallery, load_gallery, save_gallery
from .losses import Classifier
from .matching import rank

DEFAULT_NUM_CLASSES = 64


def _strategy(value: str) -> str:
    name = value.replace("-", "_")
    if name not in DROP_STRATEGIES:
        raise argparse.ArgumentTypeError(
            f"unknown strategy {value!r}; expected one of "
            + ", ".join(s.replace("_", "-") for s in DROP_STRATEGIES)
        )
    return name


def _config_from_json(path) -> tuple[EncoderConfig, int]:
    with Path(path).open("r", encoding="utf-8") as fh:
        raw = json.load(fh)
    num_classes = int(raw.pop("num_classes", DEFAULT_NUM_CLASSES))
    if "sparsify_layers" in raw:
        raw["sparsify_layers"] = tuple(raw["sparsify_layers"])
    return EncoderConfig(**raw), num_classes


def _load_corpus(directory, cfg: EncoderConfig) -> list[LabeledImage]:
    """Labeled images from every .ppm file in a directory, sorted by name."""
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise InputError(f"no .ppm files found in {directory}")
    out = []
    for path in paths:
        pid, camid = parse_metadata(path.name)
        out.append(
            LabeledImage(
                pixels=load_image(path, cfg),
                person_id=pid,
                camera_id=camid,
                source=str(path),
            )
        )
    return out


def _runtime_config(cfg: EncoderConfig, args) -> EncoderConfig:
    updates = {}
    if getattr(args, "keep_rate", None) is not None:
        updates["keep_rate"] = args.keep_rate
    if getattr(args, "strategy", None) is not None:
        updates["drop_strategy"] = args.strategy
    return replace(cfg, **updates) if updates else cfg


# --- subcommands -------------------------------------------------------------


def cmd_init_weights(args) -> int:
    if args.config:
        cfg, num_classes = _config_from_json(args.config)
    else:
        cfg, num_classes = EncoderConfig(), DEFAULT_NUM_CLASSES
    encoder = init_weights(cfg, args.seed)
    decoder = init_decoder_weights(cfg.embed_dim, cfg.mlp_dim, cfg.heads, args.seed + 1)
    rng = np.random.default_rng(args.seed + 2)
    classifier = Classifier(
        weight=rng.normal(0.0, 1.0 / np.sqrt(cfg.embed_dim), (num_classes, cfg.embed_dim)).astype(
            np.float32
        ),
        bias=np.zeros(num_classes, dtype=np.float32),
    )
    save_model(args.out, cfg, encoder, decoder, classifier)
    print(f"wrote {args.out}")
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        identities=args.ids,
        images_per_identity=args.per_id,
        grid_h=21,
        grid_w=10,
        cell_px=12,
        occlusion_rate=args.occlusion_rate,
        seed=args.seed,
    )
    queries, gallery = generate_synthetic(spec)
    out = Path(args.out)
    target_h, target_w = EncoderConfig().image_h, EncoderConfig().image_w

    def pad(pixels):
        h, w = pixels.shape[:2]
        return np.pad(pixels, ((0, target_h - h), (0, target_w - w), (0, 0)), mode="edge")

    for sub, images in (("gallery", gallery), ("query", queries)):
        directory = out / sub
        directory.mkdir(parents=True, exist_ok=True)
        counters: dict[int, int] = {}
        for img in images:
            idx = counters.get(img.person_id, 0)
            counters[img.person_id] = idx + 1
            name = f"{img.person_id:04d}_c{img.camera_id + 1}_{idx:02d}.ppm"
            save_ppm(directory / name, pad(img.pixels))
    print(f"wrote {len(gallery)} gallery and {len(queries)} query images under {out}")
    return 0


def cmd_build_gallery(args) -> int:
    cfg, encoder, _, _ = load_model(args.weights)
    corpus = _load_corpus(args.images, cfg)
    memory = build_gallery(
        [(img.pixels, img.person_id, img.camera_id) for img in corpus], cfg, encoder
    )
    save_gallery(memory, args.out)
    print(f"wrote {len(memory)} records to {args.out}")
    return 0


def cmd_query(args) -> int:
    cfg, encoder, decoder, _ = load_model(args.weights)
    cfg = _runtime_config(cfg, args)
    memory = load_gallery(args.gallery)
    feat = encode(load_image(args.image, cfg), args.camera, cfg, encoder)
    ranked = rank(feat, memory, alpha=args.alpha, k=args.k)
    candidates = ranked.candidates

    report = None
    multiview = None
    if args.consolidate or args.explain:
        neighbors = [memory.records[c.position] for c in candidates]
        multiview = assemble_multiview(feat, neighbors)
    if args.explain:
        report = decompose_cls_attention(multiview, decoder)
    if args.consolidate:
        consolidated = decode(multiview, decoder)
        nc = np.linalg.norm(consolidated)
        re_scored = []
        for c in candidates:
            cls = memory.records[c.position].cls.astype(np.float64)
            ng = np.linalg.norm(cls)
            denom = (nc * ng) if nc > 0 and ng > 0 else 1.0
            re_scored.append((1.0 - float(consolidated @ cls) / denom, c))
        re_scored.sort(key=lambda t: (t[0], t[1].position))
        candidates = [c for _, c in re_scored]

    print(f"{'rank':>4} {'pid':>6} {'cam':>4} {'d_cos':>9} {'d_emd':>9} {'d_combined':>11}")
    for i, c in enumerate(candidates, start=1):
        rec = memory.records[c.position]
        print(
            f"{i:>4} {rec.person_id:>6} {rec.camera_id:>4} "
            f"{c.d_cos:9.4f} {c.d_emd:9.4f} {c.d_combined:11.4f}"
        )
    if args.explain and report is not None:
        print(f"attention mass: cls={report.mass_c:.4f} query={report.mass_q:.4f}")
        for i, (mass, c) in enumerate(zip(report.neighbor_masses, ranked.candidates), start=1):
            rec = memory.records[c.position]
            print(f"neighbor {i} (pid {rec.person_id}, cam {rec.camera_id}): mass={mass:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, encoder, decoder, _ = load_model(args.weights)
    cfg = _runtime_config(cfg, args)
    memory = load_gallery(args.gallery)
    queries = _load_corpus(args.queries, cfg)
    report = evaluate(
        queries,
        memory,
        cfg,
        encoder,
        alpha=args.alpha,
        k=args.k,
        consolidate=args.consolidate,
        decoder_weights=decoder,
    )
    print(
        f"Rank-1: {report.rank_n(1):.4f}  Rank-5: {report.rank_n(5):.4f}  "
        f"Rank-10: {report.rank_n(10):.4f}  mAP: {report.map:.4f}  "
        f"FLOPs: {report.flops.total}"
    )
    if args.jsonl:
        with Path(args.jsonl).open("w", encoding="utf-8") as fh:
            for i, (ap, r) in enumerate(zip(report.per_query_ap, report.per_query_rank)):
                fh.write(
                    json.dumps(
                        {"query": i, "ap": ap, "first_match_rank": r}, sort_keys=True
                    )
                    + "\n"
                )
    return 0


def cmd_sweep(args) -> int:
    cfg, encoder, decoder, _ = load_model(args.weights)
    cfg = _runtime_config(cfg, args)
    memory = load_gallery(args.gallery)
    queries = _load_corpus(args.queries, cfg)
    param = args.param.replace("-", "_")
    raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if param in ("keep_rate", "alpha"):
        values: list = [float(v) for v in raw_values]
    elif param == "k":
        values = [int(v) for v in raw_values]
    else:
        values = [_strategy(v) for v in raw_values]
    rows = sweep(
        param,
        values,
        queries,
        memory,
        cfg,
        encoder,
        alpha=args.alpha,
        k=args.k,
        consolidate=args.consolidate,
        decoder_weights=decoder,
    )
    print(format_sweep_table(param, rows))
    if args.jsonl:
        with Path(args.jsonl).open("w", encoding="utf-8") as fh:
            for record in sweep_jsonl_records(param, rows):
                fh.write(record + "\n")
    return 0


def cmd_visualize_drop(args) -> int:
    cfg, encoder, _, _ = load_model(args.weights)
    cfg = replace(cfg, keep_rate=args.keep_rate)
    if args.strategy is not None:
        cfg = replace(cfg, drop_strategy=args.strategy)
    pixels = load_image(args.image, cfg)
    feat = encode(pixels, args.camera, cfg, encoder)
    p, s = cfg.patch_size, cfg.patch_stride
    for stage, layer_idx in enumerate(sorted(cfg.sparsify_layers)):
        mask = feat.kept_masks[stage]
        covered = np.zeros((cfg.image_h, cfg.image_w), dtype=bool)
        for flat in np.flatnonzero(mask):
            gy, gx = divmod(int(flat), cfg.grid_w)
            covered[gy * s : gy * s + p, gx * s : gx * s + p] = True
        overlay = pixels.copy()
        overlay[~covered] = 255
        out = f"{args.out}_layer{layer_idx}.ppm"
        save_ppm(out, overlay)
        print(f"wrote {out}")
    return 0


# --- parser ------------------------------------------------------------------


def _add_ranking_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=float, default=0.4,
                        help="weight of the patch-level distance (default 0.4)")
    parser.add_argument("--k", type=int, default=10,
                        help="neighbors kept after re-ranking (default 10)")
    parser.add_argument("--keep-rate", dest="keep_rate", type=float, default=None,
                        help="token keep rate per pruning stage (default from weights: 0.8)")
    parser.add_argument("--strategy", type=_strategy, default=None,
                        help="drop strategy: non-salient | random | salient")
    parser.add_argument("--consolidate", action="store_true",
                        help="re-score the top k through the consolidation decoder")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occreid",
        description="Occlusion-robust image retrieval with token-pruned transformer features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-weights", help="write a seed-deterministic weight file")
    p.add_argument("--config", default=None, help="JSON file overriding encoder geometry")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("gen-synthetic", help="write a synthetic occlusion fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--per-id", dest="per_id", type=int, default=4)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("build-gallery", help="encode a directory of images into gallery memory")
    p.add_argument("--weights", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_gallery)

    p = sub.add_parser("query", help="rank the gallery against one query image")
    p.add_argument("--weights", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--camera", type=int, required=True)
    _add_ranking_flags(p)
    p.add_argument("--explain", action="store_true",
                   help="print per-neighbor attention masses")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="score a query directory against the gallery")
    p.add_argument("--weights", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries", required=True)
    _add_ranking_flags(p)
    p.add_argument("--jsonl", default=None, help="write per-query records to this path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="evaluate over a list of parameter values")
    p.add_argument("--param", required=True,
                   choices=["keep-rate", "alpha", "k", "strategy"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--weights", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries", required=True)
    _add_ranking_flags(p)
    p.add_argument("--jsonl", default=None, help="write one record per sweep point")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("visualize-drop", help="write per-stage masks of dropped patches")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--camera", type=int, required=True)
    p.add_argument("--keep-rate", dest="keep_rate", type=float, required=True)
    p.add_argument("--strategy", type=_strategy, default=None)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_visualize_drop)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
