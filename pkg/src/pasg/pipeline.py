"""Object-level pipeline: geometry, alignment, refinement, persistence.

Every stage persists its artifacts before the manifest advances, so a
killed run can always resume from what is actually on disk. Objects are
independent; one failure never touches another object's outputs.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aligner import (
    Transcript,
    build_alignment_prompt,
    build_identify_prompt,
    parse_alignment_response,
    parse_identify_response,
    query,
)
from .config import PipelineConfig
from .errors import ContourTooShort, CorruptManifest, EmptyMask, NoDepth, PasgError
from .filtering import filter_keypoints
from .keypoints import Keypoint2D, KeypointSource, extract_raw_keypoints
from .lifting import (
    CalibrationResult,
    Keypoint3D,
    PrincipalFrame,
    calibrate_principal_frame,
    default_frame,
    lift_keypoint,
    merge_cross_view,
)
from .masks import BinaryMask, extract_foreground
from .overlay import render_overlay, save_overlay
from .refine import RefineOutcome, run_self_refine
from .segproviders import SegmentationRequest
from .semantics import (
    AnnotationRecord,
    Correspondence,
    FrameRecord,
    InteractionPrimitive,
    KeypointRecord,
    parse_annotation,
    resolve_record,
    serialize_annotation,
    unify_primitives,
    validate_correspondences,
)
from .viewio import ViewSet, load_view_set

log = logging.getLogger(__name__)

PENDING = "pending"
EXTRACTED = "extracted"
ALIGNED = "aligned"
REFINED = "refined"
FAILED = "failed"
STAGE_ORDER = (PENDING, EXTRACTED, ALIGNED, REFINED)

GEOMETRY_FILE = "geometry.json"
IDENTIFY_FILE = "identify.json"
ALIGN_FILE = "align.json"


# --- manifest ----------------------------------------------------------------

@dataclass
class RunManifest:
    run_id: str
    config: dict
    objects: dict = field(default_factory=dict)

    def object_status(self, object_id: str) -> str:
        return self.objects.get(object_id, {}).get("status", PENDING)

    def update(self, object_id: str, status: str, reason: str | None = None,
               timing: tuple[str, float] | None = None):
        entry = self.objects.setdefault(
            object_id, {"status": PENDING, "reason": None, "timings": {}}
        )
        entry["status"] = status
        entry["reason"] = reason
        if timing:
            entry["timings"][timing[0]] = round(timing[1], 4)

    def path(self, run_dir: Path) -> Path:
        return Path(run_dir) / "manifest.json"

    def save(self, run_dir: Path):
        path = self.path(run_dir)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        doc = {"run_id": self.run_id, "config": self.config, "objects": self.objects}
        tmp.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, run_dir: Path) -> "RunManifest":
        path = Path(run_dir) / "manifest.json"
        try:
            doc = json.loads(path.read_text())
            return cls(run_id=doc["run_id"], config=doc["config"], objects=doc["objects"])
        except FileNotFoundError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise CorruptManifest(f"{path}: {exc}") from exc


# --- geometry stage ----------------------------------------------------------

def _view_image(view) -> np.ndarray:
    if view.rgb is not None:
        return view.rgb
    return np.where(view.mask.data, 255, 0).astype(np.uint8)


def _keypoint3d_to_record(k: Keypoint3D) -> KeypointRecord:
    return KeypointRecord(
        index=k.index,
        pos=tuple(float(v) for v in k.pos),
        source=k.source.value,
        support=[
            {"view_id": vid, "x": kp.x, "y": kp.y, "source": kp.source.value}
            for vid, kp in k.support
        ],
    )


def _record_to_keypoint3d(rec: KeypointRecord) -> Keypoint3D:
    support = [
        (
            int(s["view_id"]),
            Keypoint2D(float(s["x"]), float(s["y"]), KeypointSource(s["source"]), int(s["view_id"])),
        )
        for s in rec.support
    ]
    return Keypoint3D(
        pos=np.asarray(rec.pos), index=rec.index, support=support,
        source=KeypointSource(rec.source),
    )


def extract_geometry(
    view_set: ViewSet,
    seg_provider,
    cfg: PipelineConfig,
    gamma: int,
    pinned: list[Keypoint3D] | None = None,
    start_index: int | None = None,
) -> tuple[list[Keypoint3D], float]:
    """Segment every view at ``gamma``, extract and filter keypoints, lift
    them, and merge across views. Returns the merged set and the radius."""
    ex = cfg.extraction
    lifted = []
    for view in view_set.views:
        size = (view.mask.height, view.mask.width)
        request = SegmentationRequest(
            view_key=f"view_{view.meta.view_id}",
            gamma=gamma,
            expected_size=size,
            image=_view_image(view),
        )
        segments = seg_provider.segment(request)
        k_raw: list[Keypoint2D] = []
        for seg_mask in segments.masks:
            if seg_mask.is_empty():
                continue
            clean = extract_foreground(seg_mask, ex.min_area_frac)
            try:
                k_raw.extend(
                    extract_raw_keypoints(
                        clean,
                        view_id=view.meta.view_id,
                        simplify_eps=ex.simplify_eps,
                        polygon_angle_thresh=ex.polygon_angle_thresh,
                        curvature_window=ex.curvature_window,
                        curvature_angle_thresh=ex.curvature_angle_thresh,
                    )
                )
            except (EmptyMask, ContourTooShort):
                continue
        if not k_raw:
            continue
        try:
            bbox_diag = view.mask.bbox_diagonal()
        except EmptyMask:
            bbox_diag = None
        filtered = filter_keypoints(k_raw, cfg.filter, bbox_diagonal=bbox_diag)
        for kp in filtered:
            try:
                world = lift_keypoint(kp, view.depth, view.camera)
            except NoDepth:
                log.debug("%s view %d: dropping keypoint over depth hole at (%.1f, %.1f)",
                          view_set.object_id, view.meta.view_id, kp.x, kp.y)
                continue
            lifted.append((view.meta.view_id, kp, world))
    if not lifted and not pinned:
        raise EmptyMask(f"{view_set.object_id}: no liftable keypoints in any view")

    positions = [w for _, _, w in lifted] + [k.pos for k in (pinned or [])]
    arr = np.asarray(positions)
    diag = float(np.linalg.norm(arr.max(axis=0) - arr.min(axis=0))) if len(arr) else 0.0
    radius = max(cfg.lifting.merge_radius_frac * diag, 1e-9)
    merged = merge_cross_view(lifted, radius, pinned=pinned, start_index=start_index)
    return merged, radius


def calibrate_frame(view_set: ViewSet, cfg: PipelineConfig) -> CalibrationResult:
    frame = default_frame()
    if view_set.top is None or view_set.bottom is None:
        return CalibrationResult(frame=frame, status="default_kept", deviation_deg=0.0)
    return calibrate_principal_frame(
        (view_set.top.mask, view_set.top.depth, view_set.top.camera),
        (view_set.bottom.mask, view_set.bottom.depth, view_set.bottom.camera),
        frame,
        deviation_thresh_deg=cfg.lifting.deviation_thresh_deg,
    )


def render_all_overlays(view_set: ViewSet, keypoints: list[Keypoint3D],
                        frame: PrincipalFrame, obj_dir: Path) -> list[Path]:
    paths = []
    for view in view_set.views:
        img = render_overlay(view.rgb, keypoints, frame, view.camera,
                             size=(view.mask.height, view.mask.width))
        path = Path(obj_dir) / f"overlay_view_{view.meta.view_id}.png"
        save_overlay(img, path)
        paths.append(path)
    return paths


def _frame_record(calib: CalibrationResult) -> FrameRecord:
    f = calib.frame
    return FrameRecord(
        origin=tuple(float(v) for v in f.origin),
        x_axis=tuple(float(v) for v in f.x_axis),
        y_axis=tuple(float(v) for v in f.y_axis),
        z_axis=tuple(float(v) for v in f.z_axis),
        calibration=calib.status,
    )


def save_geometry(obj_dir: Path, keypoints: list[Keypoint3D], frame_rec: FrameRecord,
                  merge_radius: float):
    doc = {
        "frame": {
            "origin": list(frame_rec.origin),
            "x_axis": list(frame_rec.x_axis),
            "y_axis": list(frame_rec.y_axis),
            "z_axis": list(frame_rec.z_axis),
            "calibration": frame_rec.calibration,
        },
        "merge_radius": merge_radius,
        "keypoints": [
            {
                "index": k.index,
                "pos": [float(v) for v in k.pos],
                "source": k.source.value,
                "support": [
                    {"view_id": vid, "x": kp.x, "y": kp.y, "source": kp.source.value}
                    for vid, kp in k.support
                ],
            }
            for k in keypoints
        ],
    }
    tmp = Path(obj_dir) / (GEOMETRY_FILE + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n")
    os.replace(tmp, Path(obj_dir) / GEOMETRY_FILE)


def load_geometry(obj_dir: Path) -> tuple[list[Keypoint3D], FrameRecord, float]:
    doc = json.loads((Path(obj_dir) / GEOMETRY_FILE).read_text())
    frame = FrameRecord(
        origin=tuple(doc["frame"]["origin"]),
        x_axis=tuple(doc["frame"]["x_axis"]),
        y_axis=tuple(doc["frame"]["y_axis"]),
        z_axis=tuple(doc["frame"]["z_axis"]),
        calibration=doc["frame"]["calibration"],
    )
    kps = []
    for k in doc["keypoints"]:
        support = [
            (int(s["view_id"]),
             Keypoint2D(float(s["x"]), float(s["y"]), KeypointSource(s["source"]), int(s["view_id"])))
            for s in k["support"]
        ]
        kps.append(Keypoint3D(pos=np.asarray(k["pos"]), index=int(k["index"]),
                              support=support, source=KeypointSource(k["source"])))
    return kps, frame, float(doc["merge_radius"])


# --- alignment + refinement --------------------------------------------------

def _dedup_primitives(prims: list[InteractionPrimitive]) -> list[InteractionPrimitive]:
    seen = set()
    out = []
    for p in prims:
        if p.key() not in seen:
            seen.add(p.key())
            out.append(p)
    return out


class _ObjectRefineHooks:
    """Real geometry/alignment callbacks bound to one object."""

    def __init__(self, state: "_ObjectState"):
        self.state = state

    def resample(self, gamma: int, keep_ids: set[int]) -> set[int]:
        st = self.state
        pinned = [k for k in st.keypoints if k.index in keep_ids]
        start = max((k.index for k in st.keypoints), default=0) + 1
        merged, radius = extract_geometry(
            st.view_set, st.seg, st.cfg, gamma, pinned=pinned, start_index=start
        )
        st.keypoints = merged
        st.merge_radius = radius
        render_all_overlays(st.view_set, st.keypoints, st.frame, st.obj_dir)
        save_geometry(st.obj_dir, st.keypoints, st.frame_rec, radius)
        return {k.index for k in st.keypoints}

    def align(self, targets: list[Correspondence], gamma: int) -> list[Correspondence]:
        st = self.state
        prims = [
            InteractionPrimitive(
                klass=c.record_class, structure=c.description,
                function=c.stage, stage=c.stage,
            )
            for c in targets
        ]
        bundle = build_alignment_prompt(_dedup_primitives(prims), st.overlay_paths())
        text = query(st.aligner, bundle.text, bundle.images,
                     transcript=st.transcript, sleeper=st.sleeper)
        return parse_alignment_response(text)


@dataclass
class _ObjectState:
    view_set: ViewSet
    seg: object
    aligner: object
    cfg: PipelineConfig
    obj_dir: Path
    transcript: Transcript | None = None
    sleeper: object = time.sleep
    keypoints: list[Keypoint3D] = field(default_factory=list)
    frame: PrincipalFrame = field(default_factory=default_frame)
    frame_rec: FrameRecord | None = None
    merge_radius: float = 0.0

    def overlay_paths(self) -> list[Path]:
        return [self.obj_dir / f"overlay_view_{v.meta.view_id}.png" for v in self.view_set.views]


def annotate_object(
    view_set: ViewSet,
    seg_provider,
    aligner_provider,
    cfg: PipelineConfig,
    obj_dir: Path,
    stage_done=None,
    resume_from: str = PENDING,
    sleeper=time.sleep,
) -> RefineOutcome:
    """Run one object through extract, align, and refine.

    ``resume_from`` names the last completed stage; artifacts for that
    stage must already exist on disk.
    """
    obj_dir = Path(obj_dir)
    obj_dir.mkdir(parents=True, exist_ok=True)
    transcript = Transcript(obj_dir / "transcript.jsonl")
    state = _ObjectState(
        view_set=view_set, seg=seg_provider, aligner=aligner_provider,
        cfg=cfg, obj_dir=obj_dir, transcript=transcript, sleeper=sleeper,
    )

    def done(stage: str, t0: float):
        if stage_done:
            stage_done(stage, time.monotonic() - t0)

    # Stage 1: geometry at the coarsest granularity.
    gamma0 = cfg.refine.granularity_levels[0]
    if resume_from in (PENDING,):
        t0 = time.monotonic()
        keypoints, radius = extract_geometry(view_set, seg_provider, cfg, gamma0)
        calib = calibrate_frame(view_set, cfg)
        state.keypoints = keypoints
        state.frame = calib.frame
        state.frame_rec = _frame_record(calib)
        state.merge_radius = radius
        render_all_overlays(view_set, keypoints, calib.frame, obj_dir)
        save_geometry(obj_dir, keypoints, state.frame_rec, radius)
        done(EXTRACTED, t0)
    else:
        keypoints, frame_rec, radius = load_geometry(obj_dir)
        state.keypoints = keypoints
        state.frame_rec = frame_rec
        state.frame = PrincipalFrame(
            origin=np.asarray(frame_rec.origin),
            x_axis=np.asarray(frame_rec.x_axis),
            y_axis=np.asarray(frame_rec.y_axis),
            z_axis=np.asarray(frame_rec.z_axis),
        )
        state.merge_radius = radius

    # Stage 2: identify tasks, then bind semantics to geometry.
    if resume_from in (PENDING, EXTRACTED):
        t0 = time.monotonic()
        overlays = state.overlay_paths()
        bundle = build_identify_prompt(overlays)
        identify_text = query(aligner_provider, bundle.text, bundle.images,
                              transcript=transcript, sleeper=sleeper)
        identify = parse_identify_response(identify_text)
        unified = unify_primitives(identify.tasks) if identify.tasks else None
        if unified is not None and len(unified):
            primitives = _dedup_primitives(unified.points + unified.axes)
        else:
            primitives = _dedup_primitives(identify.primitives)
        (obj_dir / IDENTIFY_FILE).write_text(json.dumps({
            "response": identify_text,
            "tasks": [
                {"task_id": t.task_id, "description": t.description,
                 "stages": [s.stage_name for s in t.subgoals]}
                for t in identify.tasks
            ],
            "primitives": [
                {"class": p.klass.value, "stage": p.stage, "description": p.structure}
                for p in primitives
            ],
        }, indent=2, ensure_ascii=False) + "\n")

        align_bundle = build_alignment_prompt(primitives, overlays)
        align_text = query(aligner_provider, align_bundle.text, align_bundle.images,
                           transcript=transcript, sleeper=sleeper)
        initial = parse_alignment_response(align_text)
        draft = AnnotationRecord(
            object_id=view_set.object_id,
            frame=state.frame_rec,
            keypoints=[_keypoint3d_to_record(k) for k in state.keypoints],
            correspondences=initial,
        )
        tmp = obj_dir / (ALIGN_FILE + ".tmp")
        tmp.write_bytes(serialize_annotation(draft))
        os.replace(tmp, obj_dir / ALIGN_FILE)
        done(ALIGNED, t0)
    else:
        draft = parse_annotation((obj_dir / ALIGN_FILE).read_bytes())
        initial = draft.correspondences

    # Stage 3: the self-refine loop.
    t0 = time.monotonic()
    trace_path = obj_dir / f"{view_set.object_id}.refine-trace.jsonl"
    trace_file = open(trace_path, "w" if resume_from in (PENDING, EXTRACTED, ALIGNED) else "a",
                      encoding="utf-8")
    try:
        def sink(event):
            trace_file.write(json.dumps(event, ensure_ascii=False) + "\n")

        outcome = run_self_refine(
            initial,
            _ObjectRefineHooks(state),
            cfg.refine,
            known_ids={k.index for k in state.keypoints},
            trace_sink=sink,
        )
    finally:
        trace_file.close()

    if outcome.succeeded:
        record = AnnotationRecord(
            object_id=view_set.object_id,
            frame=state.frame_rec,
            keypoints=[_keypoint3d_to_record(k) for k in state.keypoints],
            correspondences=outcome.correspondences,
        )
        report = validate_correspondences(record, cfg.refine.low_conf_threshold)
        if not report.all_ok():
            log.warning("%s: refined record still carries %d non-ok entries",
                        view_set.object_id, len(report.low_set()))
        resolve_record(record)
        out_path = obj_dir / f"{view_set.object_id}.annotation.json"
        tmp = out_path.with_suffix(".json.tmp")
        tmp.write_bytes(serialize_annotation(record))
        os.replace(tmp, out_path)
        done(REFINED, t0)
    return outcome


# --- run orchestration ---------------------------------------------------------

def discover_objects(input_dir: Path) -> list[Path]:
    input_dir = Path(input_dir)
    return sorted(
        d for d in input_dir.iterdir()
        if d.is_dir() and (d / "view_0").is_dir()
    )


def _entry_stage(manifest: RunManifest, object_id: str, obj_dir: Path) -> str:
    """Last completed stage supported by on-disk artifacts."""
    claimed = manifest.object_status(object_id)
    if claimed == FAILED:
        return FAILED
    order = {s: i for i, s in enumerate(STAGE_ORDER)}
    stage = claimed if claimed in order else PENDING
    # Demote until the artifacts for the claimed stage actually exist.
    if order[stage] >= order[ALIGNED] and not (obj_dir / ALIGN_FILE).exists():
        stage = EXTRACTED
    if order[stage] >= order[EXTRACTED] and not (obj_dir / GEOMETRY_FILE).exists():
        stage = PENDING
    return stage


def run_pipeline(
    input_dir: Path,
    out_root: Path,
    run_id: str,
    cfg: PipelineConfig,
    seg_provider,
    aligner_provider,
    resume_existing: bool = False,
    sleeper=time.sleep,
) -> RunManifest:
    """Annotate every object under ``input_dir`` into ``out_root/run_id``."""
    input_dir = Path(input_dir)
    run_dir = Path(out_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    if resume_existing:
        manifest = RunManifest.load(run_dir)
    else:
        manifest = RunManifest(run_id=run_id, config=cfg.snapshot())
    lock = threading.Lock()

    object_dirs = discover_objects(input_dir)
    if not object_dirs:
        raise EmptyMask(f"no objects found under {input_dir}")

    def work(obj_path: Path):
        object_id = obj_path.name
        obj_dir = run_dir / object_id
        entry = _entry_stage(manifest, object_id, obj_dir) if resume_existing else PENDING
        if entry in (REFINED, FAILED):
            return
        def stage_done(stage, seconds):
            with lock:
                manifest.update(object_id, stage, timing=(stage, seconds))
                manifest.save(run_dir)
        try:
            view_set = load_view_set(obj_path)
            outcome = annotate_object(
                view_set, seg_provider, aligner_provider, cfg, obj_dir,
                stage_done=stage_done, resume_from=entry, sleeper=sleeper,
            )
            with lock:
                if outcome.succeeded:
                    manifest.update(object_id, REFINED)
                else:
                    manifest.update(object_id, FAILED, reason=outcome.failure_cause)
                manifest.save(run_dir)
        except PasgError as exc:
            log.error("%s failed: %s", object_id, exc)
            with lock:
                manifest.update(object_id, FAILED, reason=f"{type(exc).__name__}: {exc}")
                manifest.save(run_dir)
        except Exception as exc:  # isolation: never poison sibling objects
            log.exception("%s crashed", object_id)
            with lock:
                manifest.update(object_id, FAILED, reason=f"crash: {type(exc).__name__}: {exc}")
                manifest.save(run_dir)

    workers = cfg.run.workers or min(len(object_dirs), os.cpu_count() or 1)
    if workers <= 1:
        for path in object_dirs:
            work(path)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, object_dirs))
    manifest.save(run_dir)
    return manifest


def resume(run_id: str, out_root: Path, input_dir: Path, cfg: PipelineConfig,
           seg_provider, aligner_provider, sleeper=time.sleep) -> RunManifest:
    """Continue an interrupted run; terminal objects are skipped."""
    return run_pipeline(
        input_dir, out_root, run_id, cfg, seg_provider, aligner_provider,
        resume_existing=True, sleeper=sleeper,
    )
