"""Acceptance gate: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass line
per criterion with its runtime.
"""
import json
import math
import random
import shutil
import time
from contextlib import contextmanager

import numpy as np
import pytest

from pasg.benchmark import Category, evaluate, generate_all, split_dataset, train_count
from pasg.cli import main
from pasg.config import PipelineConfig
from pasg.errors import ProviderUnavailable
from pasg.filtering import dbscan, farthest_point_sampling
from pasg.keypoints import Keypoint2D, KeypointSource, centroid, pca_axes, simplify_polygon, trace_contour
from pasg.lifting import (
    calibrate_principal_frame,
    camera_for_view,
    default_frame,
    lift_keypoint,
    merge_cross_view,
    project_to_view,
)
from pasg.masks import BinaryMask, connected_components, label_components
from pasg.refine import RefineConfig, run_self_refine
from pasg.semantics import (
    AnnotationRecord,
    Correspondence,
    FrameRecord,
    KeypointRecord,
    MatchToken,
    RecordClass,
    parse_annotation,
    serialize_annotation,
)
from pasg.synth import block_scene, render_view, sd_cylinder, tilted_cylinder_scene
from pasg.viewio import CANONICAL_VIEWS

from helpers import GOLDEN, random_blob, random_nonempty_mask
from oracles import (
    brute_centroid,
    check_fps_trace,
    eig2x2,
    flood_fill_labels,
    naive_dbscan,
    partitions_equal,
    point_to_polyline,
    single_linkage_clusters,
)
from test_benchmark import make_record
from test_refine import ScriptHooks, entry


@contextmanager
def criterion(name: str, budget_s: float):
    t0 = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    dt = time.monotonic() - t0
    assert dt < budget_s, f"{name}: {dt:.1f}s exceeds {budget_s}s budget"
    print(f"[PASS] {name} ({dt:.2f}s)")


# --- geometry-oracle suite (< 60 s total) -----------------------------------

class TestGeometryOracles:
    def test_centroid_brute_force(self):
        with criterion("geometry: centroid == brute-force mean (200 masks, 1e-9)", 60):
            rng = np.random.default_rng(1001)
            for _ in range(200):
                m = random_nonempty_mask(rng, size=int(rng.integers(4, 65)))
                cx, cy = centroid(m)
                ox, oy = brute_centroid(m.data)
                assert abs(cx - ox) < 1e-9 and abs(cy - oy) < 1e-9

    def test_connected_components_flood_fill(self):
        with criterion("geometry: components == flood-fill oracle (100 masks)", 60):
            rng = np.random.default_rng(1002)
            done = 0
            while done < 100:
                m = random_nonempty_mask(rng, size=int(rng.integers(4, 65)))
                oracle = flood_fill_labels(m.data)
                assert partitions_equal(label_components(m), oracle)
                regions = connected_components(m)
                assert sorted(r.area for r in regions) == sorted(
                    int((oracle == l).sum()) for l in range(1, oracle.max() + 1))
                done += 1

    def test_dbscan_naive_reference(self):
        with criterion("geometry: DBSCAN == naive O(n^2) reference (100 sets)", 60):
            rng = np.random.default_rng(1003)
            for _ in range(100):
                n = int(rng.integers(2, 151))
                pts = rng.uniform(0, 10, (n, 2))
                eps = float(rng.uniform(0.3, 2.0))
                min_pts = int(rng.integers(1, 6))
                assert dbscan(pts, eps, min_pts).tolist() == naive_dbscan(pts, eps, min_pts)

    def test_fps_per_step_argmax(self):
        with criterion("geometry: FPS greedy verified per step (50 trials)", 60):
            rng = np.random.default_rng(1004)
            for _ in range(50):
                n = int(rng.integers(2, 101))
                k = int(rng.integers(1, 11))
                pts = rng.uniform(0, 100, (n, 2))
                assert check_fps_trace(pts, farthest_point_sampling(pts, k))

    def test_pca_axes_closed_form(self):
        with criterion("geometry: PCA axes == closed-form 2x2 eigen (1e-6)", 60):
            rng = np.random.default_rng(1005)
            checked = 0
            while checked < 60:
                m = random_blob(rng)
                if m.area < 10:
                    continue
                axes = pca_axes(m)
                rows, cols = np.nonzero(m.data)
                coords = np.stack([cols, rows], axis=1).astype(float)
                centered = coords - coords.mean(axis=0)
                cov = centered.T @ centered / coords.shape[0]
                maj, mino, (l1, l2) = eig2x2(cov)
                assert np.allclose(axes.major, maj, atol=1e-6)
                assert np.allclose(axes.minor, mino, atol=1e-6)
                dot = axes.major[0] * axes.minor[0] + axes.major[1] * axes.minor[1]
                assert abs(dot) < 1e-9
                checked += 1

    def test_simplify_polygon_deviation_bound(self):
        with criterion("geometry: polyline simplification within eps (100 runs)", 60):
            rng = np.random.default_rng(1006)
            from pasg.masks import extract_foreground

            checked = 0
            while checked < 100:
                m = extract_foreground(random_nonempty_mask(rng, size=int(rng.integers(8, 49))))
                if m.area < 8:
                    continue
                c = trace_contour(m)
                if len(c) < 4:
                    continue
                eps = float(rng.uniform(0.5, 4.0))
                verts = simplify_polygon(c, eps=eps)
                worst = max(point_to_polyline(p, verts, closed=True) for p in c.points)
                assert worst <= eps + 1e-9
                checked += 1


# --- lifting / frame suite (< 30 s total) ------------------------------------

SIZE = 128
SCALE = 1.0 / SIZE


class TestLiftingFrame:
    def test_round_trip_all_views(self):
        with criterion("lifting: lift/project round-trip <= 0.5 px (box+cylinder, 8 views)", 30):
            for sdf in (block_scene(), sd_cylinder(0.16, 0.3)):
                for view_id, (kind, az, el) in CANONICAL_VIEWS.items():
                    cam = camera_for_view(az, el, SCALE, 1.2, (SIZE, SIZE))
                    r = render_view(sdf, cam, (SIZE, SIZE))
                    ys, xs = np.nonzero(r.mask.data)
                    for i in np.linspace(0, len(ys) - 1, 15).astype(int):
                        p = Keypoint2D(float(xs[i]), float(ys[i]), KeypointSource.CENTROID, view_id)
                        try:
                            w = lift_keypoint(p, r.depth, cam)
                        except Exception:
                            continue
                        px, py = project_to_view(w, cam)
                        assert math.hypot(px - p.x, py - p.y) <= 0.5

    def test_calibration_tilted_and_upright(self):
        with criterion("lifting: tilted-cylinder calibration within 1 deg; upright keeps default", 30):
            sdf, rot = tilted_cylinder_scene(30.0)
            axis_true = rot @ np.array([0.0, 0.0, 1.0])
            views = {}
            for name, el in (("top", 90.0), ("bottom", -90.0)):
                cam = camera_for_view(0, el, SCALE, 1.2, (SIZE, SIZE))
                r = render_view(sdf, cam, (SIZE, SIZE))
                proj = np.einsum("ijk,k->ij", np.nan_to_num(r.points, nan=1e9), axis_true)
                target = 0.3 if name == "top" else -0.3
                cap = r.mask.data & (np.abs(proj - target) < 2e-3)
                views[name] = (BinaryMask(cap), r.depth, cam)
            res = calibrate_principal_frame(views["top"], views["bottom"], default_frame())
            assert res.status == "rebuilt"
            angle = math.degrees(math.acos(np.clip(res.frame.z_axis @ axis_true, -1, 1)))
            assert angle < 1.0
            for a, b in ((res.frame.x_axis, res.frame.y_axis),
                         (res.frame.x_axis, res.frame.z_axis),
                         (res.frame.y_axis, res.frame.z_axis)):
                assert abs(float(a @ b)) < 1e-9

            upright = sd_cylinder(0.12, 0.3)
            ups = {}
            for name, el in (("top", 90.0), ("bottom", -90.0)):
                cam = camera_for_view(0, el, SCALE, 1.2, (SIZE, SIZE))
                r = render_view(upright, cam, (SIZE, SIZE))
                ups[name] = (r.mask, r.depth, cam)
            res2 = calibrate_principal_frame(ups["top"], ups["bottom"], default_frame(),
                                             deviation_thresh_deg=10.0)
            assert res2.status == "default_kept"

    def test_merge_against_single_linkage(self):
        with criterion("lifting: cross-view merge == single-linkage oracle (50 sets)", 30):
            rng = np.random.default_rng(2001)
            kp = Keypoint2D(0.0, 0.0, KeypointSource.CENTROID, 0)
            for _ in range(50):
                n = int(rng.integers(2, 35))
                base = rng.uniform(0, 1, (max(n // 3, 1), 3))
                pts = base[rng.integers(0, len(base), n)] + rng.normal(0, 0.01, (n, 3))
                radius = float(rng.uniform(0.02, 0.3))
                lifted = [(i % 8, Keypoint2D(float(i), 0.0, KeypointSource.CENTROID, i % 8), pts[i])
                          for i in range(n)]
                merged = merge_cross_view(lifted, radius)
                ours = {frozenset(int(s.x) for _, s in m.support) for m in merged}
                oracle = {frozenset(c) for c in single_linkage_clusters(pts, radius)}
                assert ours == oracle


# --- refine-loop suite (< 10 s total) ---------------------------------------

class TestRefineLoop:
    def test_exhaustive_scripted_matrix(self):
        with criterion("refine: scripted matrix matches hand-derived traces", 10):
            # success at t = 1..5 on a five-level ladder
            for succeed_at in range(1, 6):
                cfg = RefineConfig(granularity_levels=(1, 2, 3, 4, 5))
                if succeed_at == 1:
                    initial, script = [entry("a")], []
                else:
                    initial = [entry("a", pos_p=0.3)]
                    script = [[entry("a", pos_p=0.3)]] * (succeed_at - 2) + [[entry("a", pos_p=0.9)]]
                hooks = ScriptHooks(script)
                out = run_self_refine(initial, hooks, cfg)
                assert out.succeeded and out.iterations == succeed_at
                assert out.gamma == succeed_at
                assert len(hooks.align_calls) == succeed_at - 1
                assert [g for _, g in hooks.align_calls] == list(range(2, succeed_at + 1))

            # granularity exhaustion at the default three levels: t = 3, not 5
            hooks = ScriptHooks([[entry("a", pos_id=MatchToken.NONE)]] * 2)
            out = run_self_refine([entry("a", pos_id=MatchToken.NONE)], hooks, RefineConfig())
            assert not out.succeeded and out.failure_cause == "gamma_max" and out.iterations == 3

            # iteration exhaustion on a deep ladder: t = tau_max = 5
            hooks = ScriptHooks([[entry("a", pos_p=0.3)]] * 4)
            out = run_self_refine([entry("a", pos_p=0.3)], hooks,
                                  RefineConfig(granularity_levels=(1, 2, 3, 4, 5, 6)))
            assert not out.succeeded and out.failure_cause == "tau_max" and out.iterations == 5

            # provider failure surfaces as a failed outcome with its cause
            hooks = ScriptHooks([ProviderUnavailable("down")])
            out = run_self_refine([entry("a", pos_p=0.2)], hooks, RefineConfig())
            assert not out.succeeded and out.failure_cause.startswith("provider_error")

            # strict threshold: s = 0.5 exactly converges immediately
            out = run_self_refine([entry("a", pos_p=0.5)], ScriptHooks([]), RefineConfig())
            assert out.succeeded and out.iterations == 1

    def test_invariants_over_randomized_scripts(self):
        with criterion("refine: non-regression and monotone granularity (200 scripts)", 10):
            rng = random.Random(4242)
            for _ in range(200):
                n = rng.randint(1, 5)
                initial = [
                    entry(f"s{i}", pos_p=rng.randint(0, 100) / 100,
                          pos_id=rng.choice([1, 2, MatchToken.NONE]))
                    for i in range(n)
                ]
                cfg = RefineConfig(granularity_levels=tuple(range(1, rng.randint(2, 7))))

                class RandomHooks(ScriptHooks):
                    def align(self, targets, gamma):
                        self.align_calls.append(([t.semantic_key() for t in targets], gamma))
                        return [
                            entry(t.stage, klass=t.record_class,
                                  pos_p=rng.randint(0, 100) / 100,
                                  pos_id=rng.choice([1, 2, MatchToken.NONE]))
                            for t in targets if rng.random() < 0.8
                        ]

                out = run_self_refine(initial, RandomHooks([]), cfg, known_ids={1, 2})
                assert out.iterations <= cfg.tau_max
                gammas = [e["gamma"] for e in out.trace]
                assert gammas == sorted(gammas)
                passed = set()
                for event in out.trace:
                    if event["action"] == "match":
                        low = set(event["low_entries"])
                        for c in initial:
                            key = f"{c.record_class.value}:{c.stage}"
                            if key not in low:
                                passed.add(key)
                    if event["action"] == "align":
                        assert not (set(event["targets"]) & passed)


# --- serialization suite -------------------------------------------------------

def _random_record(rng: random.Random) -> AnnotationRecord:
    tokens = [MatchToken.NONE, MatchToken.ERROR]
    axes = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    corrs = []
    for i in range(rng.randint(0, 6)):
        pos_id = rng.choice([rng.randint(1, 12), rng.choice(tokens)])
        ori_id = rng.choice([(rng.randint(1, 12), rng.randint(1, 12)), rng.choice(axes),
                             rng.choice(tokens)])
        corrs.append(Correspondence(
            record_class=rng.choice(list(RecordClass)),
            stage=f"stage {rng.randint(0, 30)}",
            pos_id=pos_id,
            pos_probability=rng.randint(0, 100) / 100 if isinstance(pos_id, int) else None,
            ori_id=ori_id,
            ori_probability=rng.randint(0, 100) / 100 if isinstance(ori_id, tuple) else None,
            description=f"description {rng.randint(0, 30)}",
        ))
    n_kp = rng.randint(0, 10)
    return AnnotationRecord(
        object_id=rng.choice(["", "objA", "objB"]),
        frame=None if rng.random() < 0.3 else FrameRecord(
            (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
        keypoints=[
            KeypointRecord(index=i, pos=(rng.randint(0, 9) / 4, 0.0, 1.0), source="centroid",
                           support=[{"view_id": 0, "x": 1.0, "y": 2.0, "source": "centroid"}])
            for i in range(1, n_kp + 1)
        ],
        correspondences=corrs,
    )


class TestSerialization:
    def test_round_trip_and_stability(self):
        with criterion("serialization: 100 fuzzed round-trips + byte stability", 30):
            rng = random.Random(31337)
            order = {k: i for i, k in enumerate(RecordClass)}
            for _ in range(100):
                record = _random_record(rng)
                data = serialize_annotation(record)
                back = parse_annotation(data)
                canonical = sorted(record.correspondences, key=lambda c: order[c.record_class])
                assert len(back.correspondences) == len(canonical)
                for a, b in zip(canonical, back.correspondences):
                    assert (a.record_class, a.stage, a.pos_id, a.ori_id) == (
                        b.record_class, b.stage, b.pos_id, b.ori_id)
                    assert a.pos_probability == pytest.approx(b.pos_probability)
                    assert a.ori_probability == pytest.approx(b.ori_probability)
                assert serialize_annotation(back) == data

    def test_appendix_skeleton_golden(self):
        with criterion("serialization: appendix skeleton golden byte-exact", 30):
            golden = (GOLDEN / "alignment_skeleton.annotation.json").read_bytes()
            assert serialize_annotation(parse_annotation(golden)) == golden


# --- benchmark suite -----------------------------------------------------------

class TestBenchmark:
    def test_split_arithmetic_and_disjointness(self):
        with criterion("benchmark: 80/20 floors and OOD disjointness", 60):
            assert train_count(6979, 0.8) == 5583  # published-count consistency
            records = [make_record(f"o{i:03d}") for i in range(40)]
            items = generate_all(records, seed=5).items
            ood_ids = {f"o{i:03d}" for i in range(6)}
            split = split_dataset(items, ood_ids, seed=9)
            base = [i for i in items if i.object_id not in ood_ids]
            for category in Category:
                n_c = sum(1 for i in base if i.category is category)
                got = sum(1 for i in split.train if i.category is category)
                assert got == math.floor(0.8 * n_c)
            seen = {i.object_id for i in split.train} | {i.object_id for i in split.test_in}
            assert not (seen & {i.object_id for i in split.test_ood})

    def test_random_guess_near_chance(self):
        with criterion("benchmark: random guessing scores 25% +/- 4% (1000 items)", 60):
            records = [make_record(f"r{i:03d}") for i in range(90)]
            items = generate_all(records, seed=11).items[:1000]
            assert len(items) == 1000
            rng = random.Random(99)
            preds = {i.item_id: rng.randrange(4) for i in items}
            report = evaluate(preds, items)
            assert abs(report["overall"] - 0.25) <= 0.04

    def test_answer_position_balance(self):
        with criterion("benchmark: answer positions 25% +/- 5% (1000+ items)", 60):
            records = [make_record(f"b{i:03d}") for i in range(90)]
            items = generate_all(records, seed=21).items
            assert len(items) >= 1000
            counts = [0, 0, 0, 0]
            for i in items:
                counts[i.answer_index] += 1
            for c in counts:
                assert abs(c / len(items) - 0.25) <= 0.05


# --- end-to-end offline demo ----------------------------------------------------

class TestEndToEnd:
    def test_mock_pipeline_deterministic(self, demo_objects, tmp_path):
        with criterion("e2e: mock annotate x2, byte-identical annotations, < 2 min", 120):
            for run_id in ("a", "b"):
                rc = main(["annotate", "--input", str(demo_objects),
                           "--out", str(tmp_path / "runs"), "--providers", "mock",
                           "--run-id", run_id])
                assert rc == 0
            names = ("block", "bottle", "teapot")
            for name in names:
                path_a = tmp_path / "runs" / "a" / name / f"{name}.annotation.json"
                path_b = tmp_path / "runs" / "b" / name / f"{name}.annotation.json"
                record = parse_annotation(path_a.read_bytes())
                assert record.by_class(RecordClass.GRASP), name
                assert record.by_class(RecordClass.ANCHOR), name
                known = record.keypoint_ids()
                for c in record.correspondences:
                    if isinstance(c.pos_id, int):
                        assert c.pos_id in known
                assert path_a.read_bytes() == path_b.read_bytes()
            # overlays, traces, and index assignments are deterministic too
            for name in names:
                for k in range(8):
                    a = (tmp_path / "runs" / "a" / name / f"overlay_view_{k}.png").read_bytes()
                    b = (tmp_path / "runs" / "b" / name / f"overlay_view_{k}.png").read_bytes()
                    assert a == b
                for artifact in (f"{name}.refine-trace.jsonl", "geometry.json"):
                    ta = (tmp_path / "runs" / "a" / name / artifact).read_bytes()
                    tb = (tmp_path / "runs" / "b" / name / artifact).read_bytes()
                    assert ta == tb
