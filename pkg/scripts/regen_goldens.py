#!/usr/bin/env python3
"""Regenerate the committed golden fixtures under fixtures/golden/.

Everything here is deterministic; rerunning must reproduce the committed
bytes unless intended behavior changed (in which case the diff is the
review artifact).
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = ROOT / "fixtures" / "golden"

sys.path.insert(0, str(ROOT / "src"))

from pasg.benchmark import generate_all, write_items
from pasg.lifting import camera_for_view, default_frame, merge_cross_view
from pasg.keypoints import Keypoint2D, KeypointSource
from pasg.overlay import render_overlay, save_overlay
from pasg.semantics import (
    AnnotationRecord,
    Correspondence,
    FrameRecord,
    KeypointRecord,
    RecordClass,
    serialize_annotation,
)
from pasg.synth import DEFAULT_SCALE, DEFAULT_SIZE, DEFAULT_STANDOFF, block_scene, render_view


def golden_overlay():
    """Block fixture, front view, three fixed keypoints."""
    cam = camera_for_view(0, 0, DEFAULT_SCALE, DEFAULT_STANDOFF, (DEFAULT_SIZE, DEFAULT_SIZE))
    r = render_view(block_scene(), cam, (DEFAULT_SIZE, DEFAULT_SIZE))
    lifted = [
        (0, Keypoint2D(80.0, 80.0, KeypointSource.CENTROID, 0), np.array([0.0, 0.0, 0.0])),
        (0, Keypoint2D(50.0, 60.0, KeypointSource.POLYGON_CORNER, 0), np.array([-0.2, 0.0, 0.12])),
        (0, Keypoint2D(110.0, 100.0, KeypointSource.POLYGON_CORNER, 0), np.array([0.2, 0.0, -0.12])),
    ]
    keypoints = merge_cross_view(lifted, merge_radius=0.01)
    img = render_overlay(r.rgb, keypoints, default_frame(), cam)
    save_overlay(img, GOLDEN / "overlay_block_view0.png")


def golden_annotation_skeleton():
    """The class-grouped output-format skeleton with concrete values."""
    record = AnnotationRecord(
        object_id="teapot-skeleton",
        frame=FrameRecord(
            origin=(0.0, 0.0, 0.0),
            x_axis=(1.0, 0.0, 0.0),
            y_axis=(0.0, 1.0, 0.0),
            z_axis=(0.0, 0.0, 1.0),
        ),
        keypoints=[
            KeypointRecord(index=i, pos=(0.1 * i, 0.0, 0.05 * i), source="polygon_corner",
                           support=[{"view_id": 0, "x": 10.0 * i, "y": 12.0 * i, "source": "polygon_corner"}])
            for i in (1, 2, 3, 4)
        ],
        correspondences=[
            Correspondence(
                record_class=RecordClass.GRASP, stage="Grasp Teapot",
                pos_id=2, pos_probability=0.85, ori_id=(1, 2), ori_probability=0.7,
                description="Grasping the teapot handle for secure hold",
            ),
            Correspondence(
                record_class=RecordClass.ANCHOR, stage="Align Teapot with Cup Opening",
                pos_id=3, pos_probability=0.75, ori_id=(0, 0, 1), ori_probability=1.0,
                description="Reference point and axis for positioning the teapot relative to cup",
            ),
            Correspondence(
                record_class=RecordClass.HINGE, stage="Open Lid",
                pos_id=4, pos_probability=0.75, ori_id=(0, 0, 1), ori_probability=0.9,
                description="Rotation center and axis for opening the lid",
            ),
        ],
    )
    (GOLDEN / "alignment_skeleton.annotation.json").write_bytes(serialize_annotation(record))


def _fixture_records():
    records = []
    for name, n_kp in (("kettle", 6), ("drawer", 5)):
        keypoints = [
            KeypointRecord(index=i, pos=(0.1 * i, 0.02 * i, 0.03 * i), source="curvature_corner",
                           support=[{"view_id": i % 8, "x": 8.0 * i, "y": 6.0 * i, "source": "curvature_corner"}])
            for i in range(1, n_kp + 1)
        ]
        corrs = [
            Correspondence(RecordClass.MAIN, f"hold the {name} level", 1, 0.95, (0, 0, 1), 0.95,
                           description="center reference"),
            Correspondence(RecordClass.GRASP, f"grasp the {name} grip", 2, 0.9, (1, 2), 0.85,
                           description="grip region"),
            Correspondence(RecordClass.ANCHOR, f"align the {name} for use", 3, 0.8, (0, 0, 1), 0.9,
                           description="alignment reference"),
            Correspondence(RecordClass.ACTUATION, f"press the {name} latch", 4, 0.7, (0, 0, -1), 0.75,
                           description="latch button"),
        ]
        records.append(AnnotationRecord(
            object_id=name,
            frame=FrameRecord((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)),
            keypoints=keypoints,
            correspondences=corrs,
        ))
    return records


def golden_benchmark_items():
    result = generate_all(_fixture_records(), seed=1234)
    write_items(GOLDEN / "benchmark_items.jsonl", result.items)


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    golden_overlay()
    golden_annotation_skeleton()
    golden_benchmark_items()
    print(f"goldens written to {GOLDEN}")


if __name__ == "__main__":
    main()
