"""Command-line entry point: annotate, benchgen, eval, render."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import benchmark
from .aligner import HttpAligner
from .config import PipelineConfig, load_config
from .errors import PasgError
from .lifting import PrincipalFrame, default_frame
from .mock import TemplateMockAligner
from .pipeline import (
    FAILED,
    REFINED,
    _record_to_keypoint3d,
    render_all_overlays,
    run_pipeline,
)
from .segproviders import FileSegProvider, ProceduralSegProvider, RemoteSegProvider
from .semantics import parse_annotation
from .viewio import load_view_set

log = logging.getLogger("pasg")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def build_providers(cfg: PipelineConfig, mode: str):
    levels = cfg.refine.granularity_levels
    if mode == "mock":
        return ProceduralSegProvider(levels), TemplateMockAligner()
    seg_kind = cfg.providers.seg
    if seg_kind == "procedural":
        seg = ProceduralSegProvider(levels)
    elif seg_kind == "file":
        if not cfg.providers.seg_mask_root:
            raise ValueError("file segmentation provider needs providers.seg_mask_root")
        seg = FileSegProvider(Path(cfg.providers.seg_mask_root), levels)
    elif seg_kind == "remote":
        endpoint = cfg.providers.resolved_seg_endpoint()
        if not endpoint:
            raise ValueError("remote segmentation needs providers.seg_endpoint or PASG_SEG_ENDPOINT")
        seg = RemoteSegProvider(endpoint, levels, max_in_flight=cfg.providers.max_in_flight)
    else:
        raise ValueError(f"unknown segmentation provider {seg_kind!r}")
    if cfg.providers.aligner == "mock":
        if mode == "live":
            raise ValueError(
                "live provider mode needs providers.aligner = 'http' (and vlm_endpoint) in the config"
            )
        aligner = TemplateMockAligner()
    elif cfg.providers.aligner == "http":
        if not cfg.providers.vlm_endpoint:
            raise ValueError("http aligner needs providers.vlm_endpoint")
        aligner = HttpAligner(
            cfg.providers.vlm_endpoint, cfg.providers.vlm_model,
            max_in_flight=cfg.providers.max_in_flight,
        )
    else:
        raise ValueError(f"unknown aligner provider {cfg.providers.aligner!r}")
    return seg, aligner


def cmd_annotate(args) -> int:
    cfg = load_config(args.config)
    seg, aligner = build_providers(cfg, args.providers)
    run_id = args.run_id or time.strftime("run-%Y%m%d-%H%M%S")
    manifest = run_pipeline(
        Path(args.input), Path(args.out), run_id, cfg, seg, aligner,
        resume_existing=args.resume,
    )
    statuses = {oid: o["status"] for oid, o in manifest.objects.items()}
    n_refined = sum(1 for s in statuses.values() if s == REFINED)
    n_failed = sum(1 for s in statuses.values() if s == FAILED)
    print(json.dumps({
        "run_id": run_id,
        "objects": len(statuses),
        "refined": n_refined,
        "failed": n_failed,
        "run_dir": str(Path(args.out) / run_id),
    }))
    if n_failed:
        for oid, entry in sorted(manifest.objects.items()):
            if entry["status"] == FAILED:
                log.error("object %s failed: %s", oid, entry.get("reason"))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_benchgen(args) -> int:
    annotations_dir = Path(args.annotations)
    records = []
    for path in sorted(annotations_dir.rglob("*.annotation.json")):
        records.append(parse_annotation(path.read_bytes()))
    if not records:
        raise PasgError(f"no *.annotation.json files under {annotations_dir}")
    ood_ids: set[str] = set()
    if args.ood_objects:
        ood_ids = {
            line.strip()
            for line in Path(args.ood_objects).read_text().splitlines()
            if line.strip()
        }
    result = benchmark.generate_all(records, args.seed)
    split = benchmark.split_dataset(result.items, ood_ids, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    benchmark.write_items(out / "items.jsonl", result.items)
    benchmark.write_items(out / "train.jsonl", split.train)
    benchmark.write_items(out / "test_in.jsonl", split.test_in)
    benchmark.write_items(out / "test_ood.jsonl", split.test_ood)
    summary = {
        "items": len(result.items),
        "skipped": len(result.skipped),
        "train": len(split.train),
        "test_in": len(split.test_in),
        "test_ood": len(split.test_ood),
        "seed": args.seed,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    items = benchmark.read_items(Path(args.items))
    predictions = benchmark.read_predictions(Path(args.predictions))
    report = benchmark.evaluate(predictions, items)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_render(args) -> int:
    record = parse_annotation(Path(args.record).read_bytes())
    view_set = load_view_set(Path(args.views))
    keypoints = [_record_to_keypoint3d(k) for k in record.keypoints]
    if record.frame is not None:
        frame = PrincipalFrame(
            origin=np.asarray(record.frame.origin),
            x_axis=np.asarray(record.frame.x_axis),
            y_axis=np.asarray(record.frame.y_axis),
            z_axis=np.asarray(record.frame.z_axis),
        )
    else:
        frame = default_frame()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = render_all_overlays(view_set, keypoints, frame, out)
    print(json.dumps({"overlays": [str(p) for p in paths]}))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pasg",
        description="Interaction-primitive annotation pipeline and VQA benchmark tools",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="run the annotation pipeline over a directory of objects")
    p.add_argument("--input", required=True, help="directory of <object_id>/view_k/... renders")
    p.add_argument("--config", type=Path, default=None, help="pipeline config (.toml or .json)")
    p.add_argument("--out", default="runs", help="run output root")
    p.add_argument("--providers", choices=["mock", "live"], default="mock")
    p.add_argument("--run-id", default=None)
    p.add_argument("--resume", action="store_true", help="continue an existing run id")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("benchgen", help="generate the VQA benchmark from annotation records")
    p.add_argument("--annotations", required=True)
    p.add_argument("--ood-objects", default=None, help="file listing OOD object ids, one per line")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchgen)

    p = sub.add_parser("eval", help="score a predictions file against an items file")
    p.add_argument("--items", required=True)
    p.add_argument("--predictions", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="re-render overlays for an annotation record")
    p.add_argument("--record", required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PasgError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
