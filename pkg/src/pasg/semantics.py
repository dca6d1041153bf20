"""Semantic primitive taxonomy, correspondence records, and their JSON form.

The canonical annotation serialization is byte-stable: fixed key order
(Stage, pos_ID, pos_Probability, ori_ID, ori_Probability, Pos,
Orientation, Description), record classes in the fixed order Main,
Anchor, Grasp, Actuation, Hinge, two-space indent, probabilities
quantized to two decimals.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedEntry, ParseError, SchemaError

SCHEMA_VERSION = 1

POS_PLACEHOLDER = "[x, y, z]"
ORI_PLACEHOLDER = "[dx, dy, dz]"

SYMBOLIC_AXES = (
    (1, 0, 0), (-1, 0, 0),
    (0, 1, 0), (0, -1, 0),
    (0, 0, 1), (0, 0, -1),
)


class MatchToken(enum.Enum):
    """Sentinels for unmatched primitives: NONE = not visible, ERROR =
    visible but not annotated (re-detect required)."""

    NONE = "None"
    ERROR = "Error"


class PointClass(enum.Enum):
    ANCHOR = "anchor"
    GRASP = "grasp"
    ACTUATION = "actuation"


class AxisClass(enum.Enum):
    PRIMARY = "primary"
    FUNCTIONAL = "functional"
    APPROACH = "approach"


class RecordClass(enum.Enum):
    MAIN = "Main"
    ANCHOR = "Anchor"
    GRASP = "Grasp"
    ACTUATION = "Actuation"
    HINGE = "Hinge"


RECORD_CLASS_ORDER = (
    RecordClass.MAIN,
    RecordClass.ANCHOR,
    RecordClass.GRASP,
    RecordClass.ACTUATION,
    RecordClass.HINGE,
)

# Record-level classes carry a point and an axis; this table bridges them
# onto the point/axis taxonomy. Main pairs the reference center with the
# principal axis; the others pair their point kind with the axis that
# drives their motion.
RECORD_TAXONOMY = {
    RecordClass.MAIN: (None, AxisClass.PRIMARY),
    RecordClass.ANCHOR: (PointClass.ANCHOR, AxisClass.FUNCTIONAL),
    RecordClass.GRASP: (PointClass.GRASP, AxisClass.APPROACH),
    RecordClass.ACTUATION: (PointClass.ACTUATION, AxisClass.APPROACH),
    RecordClass.HINGE: (PointClass.ACTUATION, AxisClass.FUNCTIONAL),
}


@dataclass(frozen=True)
class InteractionPrimitive:
    """A geometric entity with its structural and functional description."""

    klass: RecordClass
    structure: str
    function: str
    stage: str = ""

    def key(self) -> tuple[str, str]:
        return (self.klass.value, self.stage)


@dataclass(frozen=True)
class PrimitiveConstraint:
    """Primitives a subgoal needs, with its natural-language relation."""

    points: tuple[InteractionPrimitive, ...]
    axes: tuple[InteractionPrimitive, ...]
    description: str = ""


@dataclass(frozen=True)
class Subgoal:
    goal_id: str
    stage_name: str
    constraint: PrimitiveConstraint

    def __post_init__(self):
        if not self.stage_name:
            raise ValueError("subgoal stage_name must be non-empty")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    description: str
    subgoals: tuple[Subgoal, ...]

    def __post_init__(self):
        if not self.subgoals:
            raise ValueError("task needs at least one subgoal")


@dataclass
class UnifiedPrimitiveSet:
    points: list[InteractionPrimitive]
    axes: list[InteractionPrimitive]
    provenance: dict[InteractionPrimitive, list[tuple[str, str]]]

    def __len__(self) -> int:
        return len(self.points) + len(self.axes)


def unify_primitives(tasks: list[TaskSpec]) -> UnifiedPrimitiveSet:
    """Set union over all subgoal constraints, first-appearance ordered."""
    points: list[InteractionPrimitive] = []
    axes: list[InteractionPrimitive] = []
    provenance: dict[InteractionPrimitive, list[tuple[str, str]]] = {}
    for task in tasks:
        for goal in task.subgoals:
            for prim in goal.constraint.points:
                if prim not in provenance:
                    points.append(prim)
                provenance.setdefault(prim, []).append((task.task_id, goal.goal_id))
            for prim in goal.constraint.axes:
                if prim not in provenance:
                    axes.append(prim)
                provenance.setdefault(prim, []).append((task.task_id, goal.goal_id))
    return UnifiedPrimitiveSet(points=points, axes=axes, provenance=provenance)


# --- correspondences -------------------------------------------------------

PosId = "int | MatchToken"
OriId = "tuple | MatchToken"


@dataclass
class Correspondence:
    """One semantic primitive bound to detected geometry with confidences.

    ``ori_id`` is either a keypoint pair (from, to), one of the six signed
    unit axes, or a MatchToken. Probabilities accompany real ids only.
    ``pos``/``orientation`` stay None until resolution fills world values.
    """

    record_class: RecordClass
    stage: str
    pos_id: object
    pos_probability: float | None
    ori_id: object
    ori_probability: float | None
    description: str = ""
    pos: tuple[float, float, float] | None = None
    orientation: tuple[float, float, float] | None = None

    def __post_init__(self):
        if isinstance(self.pos_id, MatchToken):
            if self.pos_probability is not None:
                raise MalformedEntry("probability given for unmatched position")
        elif self.pos_id is not None:
            self.pos_id = int(self.pos_id)
            if self.pos_probability is None:
                raise MalformedEntry("matched position needs a probability")
        if isinstance(self.ori_id, MatchToken):
            if self.ori_probability is not None:
                raise MalformedEntry("probability given for unmatched orientation")
        elif self.ori_id is not None:
            self.ori_id = tuple(int(v) for v in self.ori_id)
            if len(self.ori_id) == 3 and self.ori_id not in SYMBOLIC_AXES:
                raise MalformedEntry(f"not a signed unit axis: {self.ori_id}")
            if len(self.ori_id) not in (2, 3):
                raise MalformedEntry(f"orientation id must be a pair or axis: {self.ori_id}")
            if self.ori_probability is None:
                raise MalformedEntry("matched orientation needs a probability")
        for p in (self.pos_probability, self.ori_probability):
            if p is not None and not (0.0 <= p <= 1.0):
                raise MalformedEntry(f"probability {p} outside [0, 1]")

    def semantic_key(self) -> tuple[str, str]:
        return (self.record_class.value, self.stage)


@dataclass
class KeypointRecord:
    """Persisted 3D keypoint: index, position, source, supporting views."""

    index: int
    pos: tuple[float, float, float]
    source: str
    support: list[dict]


@dataclass
class FrameRecord:
    origin: tuple[float, float, float]
    x_axis: tuple[float, float, float]
    y_axis: tuple[float, float, float]
    z_axis: tuple[float, float, float]
    calibration: str = "default_kept"

    def axis_for(self, symbolic: tuple[int, int, int]) -> np.ndarray:
        basis = {0: np.asarray(self.x_axis), 1: np.asarray(self.y_axis), 2: np.asarray(self.z_axis)}
        for i, v in enumerate(symbolic):
            if v != 0:
                return float(v) * basis[i]
        raise ValueError(f"not a symbolic axis: {symbolic}")


@dataclass
class AnnotationRecord:
    object_id: str = ""
    frame: FrameRecord | None = None
    keypoints: list[KeypointRecord] = field(default_factory=list)
    correspondences: list[Correspondence] = field(default_factory=list)

    def by_class(self, klass: RecordClass) -> list[Correspondence]:
        return [c for c in self.correspondences if c.record_class is klass]

    def keypoint_ids(self) -> set[int]:
        return {k.index for k in self.keypoints}

    def keypoint(self, index: int) -> KeypointRecord:
        for k in self.keypoints:
            if k.index == index:
                return k
        raise KeyError(index)

    def is_empty(self) -> bool:
        return (
            not self.object_id
            and self.frame is None
            and not self.keypoints
            and not self.correspondences
        )


# --- validation ------------------------------------------------------------

OK = "ok"
LOW_CONFIDENCE = "low_confidence"
UNMATCHED = "unmatched"
DANGLING_REF = "dangling_ref"


@dataclass
class ValidationReport:
    statuses: list[str]
    entries: list[Correspondence]

    def low_set(self) -> list[int]:
        """Indices of entries the refine loop must re-query."""
        return [i for i, s in enumerate(self.statuses) if s != OK]

    def all_ok(self) -> bool:
        return all(s == OK for s in self.statuses)


def _entry_status(c: Correspondence, known_ids: set[int], threshold: float) -> str:
    ids = []
    if isinstance(c.pos_id, int):
        ids.append(c.pos_id)
    if isinstance(c.ori_id, tuple) and len(c.ori_id) == 2:
        ids.extend(c.ori_id)
    if any(i not in known_ids for i in ids):
        return DANGLING_REF
    if isinstance(c.pos_id, MatchToken) or isinstance(c.ori_id, MatchToken):
        return UNMATCHED
    probs = [p for p in (c.pos_probability, c.ori_probability) if p is not None]
    if any(p < threshold for p in probs):
        return LOW_CONFIDENCE
    return OK


def validate_correspondences(record: AnnotationRecord, threshold: float = 0.5) -> ValidationReport:
    """Schema-level validation: id ranges, unmatched tokens, confidences.

    Confidence comparison is strictly below the threshold, so 0.5 passes.
    """
    known = record.keypoint_ids()
    statuses = [_entry_status(c, known, threshold) for c in record.correspondences]
    return ValidationReport(statuses=statuses, entries=list(record.correspondences))


# --- resolution ------------------------------------------------------------

def resolve_record(record: AnnotationRecord) -> AnnotationRecord:
    """Fill numeric Pos/Orientation from keypoint geometry and the frame.

    Symbolic axes resolve in the calibrated frame; point pairs resolve to
    the unit vector from the first to the second keypoint. Entries without
    usable references keep their placeholders.
    """
    for c in record.correspondences:
        if isinstance(c.pos_id, int) and c.pos_id in record.keypoint_ids():
            c.pos = tuple(record.keypoint(c.pos_id).pos)
        if isinstance(c.ori_id, tuple):
            if len(c.ori_id) == 3 and record.frame is not None:
                c.orientation = tuple(float(v) for v in record.frame.axis_for(c.ori_id))
            elif len(c.ori_id) == 2:
                a, b = c.ori_id
                if a in record.keypoint_ids() and b in record.keypoint_ids():
                    va = np.asarray(record.keypoint(a).pos)
                    vb = np.asarray(record.keypoint(b).pos)
                    d = vb - va
                    n = float(np.linalg.norm(d))
                    if n > 0:
                        c.orientation = tuple(float(v) for v in d / n)
    return record


# --- serialization ---------------------------------------------------------

def _quantize(p: float) -> float:
    return round(float(p) * 100.0) / 100.0


def _id_out(value) -> object:
    if isinstance(value, MatchToken):
        return value.value
    if isinstance(value, tuple):
        return list(value)
    return value


def _entry_doc(c: Correspondence) -> dict:
    doc = {"Stage": c.stage, "pos_ID": _id_out(c.pos_id)}
    if c.pos_probability is not None:
        doc["pos_Probability"] = _quantize(c.pos_probability)
    doc["ori_ID"] = _id_out(c.ori_id)
    if c.ori_probability is not None:
        doc["ori_Probability"] = _quantize(c.ori_probability)
    doc["Pos"] = [float(v) for v in c.pos] if c.pos is not None else POS_PLACEHOLDER
    doc["Orientation"] = (
        [float(v) for v in c.orientation] if c.orientation is not None else ORI_PLACEHOLDER
    )
    doc["Description"] = c.description
    return doc


def serialize_annotation(record: AnnotationRecord) -> bytes:
    """Canonical, byte-stable annotation JSON (UTF-8)."""
    doc: dict = {}
    if not record.is_empty():
        doc["pasg_schema"] = SCHEMA_VERSION
        if record.object_id:
            doc["object_id"] = record.object_id
        if record.frame is not None:
            doc["frame"] = {
                "origin": [float(v) for v in record.frame.origin],
                "x_axis": [float(v) for v in record.frame.x_axis],
                "y_axis": [float(v) for v in record.frame.y_axis],
                "z_axis": [float(v) for v in record.frame.z_axis],
                "calibration": record.frame.calibration,
            }
        if record.keypoints:
            doc["keypoints"] = [
                {
                    "index": int(k.index),
                    "pos": [float(v) for v in k.pos],
                    "source": k.source,
                    "support": k.support,
                }
                for k in record.keypoints
            ]
        for klass in RECORD_CLASS_ORDER:
            entries = record.by_class(klass)
            if entries:
                doc[klass.value] = [_entry_doc(c) for c in entries]
    return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _parse_probability(raw, path: str) -> float:
    if not isinstance(raw, (int, float)) or isinstance(raw, bool):
        raise MalformedEntry(f"{path}: probability must be a number, got {raw!r}")
    p = float(raw)
    if not (0.0 <= p <= 1.0):
        raise MalformedEntry(f"{path}: probability {p} outside [0, 1]")
    return p


def _parse_id(raw, path: str):
    if raw is None:
        return None
    if isinstance(raw, str):
        for token in MatchToken:
            if raw == token.value:
                return token
        raise MalformedEntry(f"{path}: unknown token {raw!r}")
    if isinstance(raw, bool):
        raise MalformedEntry(f"{path}: invalid id {raw!r}")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, list):
        if len(raw) not in (2, 3) or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw):
            raise MalformedEntry(f"{path}: id list must be an int pair or axis triple")
        return tuple(raw)
    raise MalformedEntry(f"{path}: invalid id {raw!r}")


def _parse_vector(raw, placeholder: str, path: str):
    if raw is None or raw == placeholder:
        return None
    if isinstance(raw, str):
        return None  # any other placeholder text stays unresolved
    if isinstance(raw, list) and len(raw) == 3 and all(isinstance(v, (int, float)) for v in raw):
        return tuple(float(v) for v in raw)
    raise MalformedEntry(f"{path}: expected 3-vector or placeholder, got {raw!r}")


def parse_entry(doc: dict, klass: RecordClass, path: str) -> Correspondence:
    if not isinstance(doc, dict):
        raise MalformedEntry(f"{path}: entry must be an object")
    known = {"Stage", "pos_ID", "pos_Probability", "ori_ID", "ori_Probability",
             "Pos", "Orientation", "Description"}
    unknown = set(doc) - known
    if unknown:
        raise MalformedEntry(f"{path}: unknown fields {sorted(unknown)}")
    pos_id = _parse_id(doc.get("pos_ID"), f"{path}.pos_ID")
    ori_id = _parse_id(doc.get("ori_ID"), f"{path}.ori_ID")
    pos_p = doc.get("pos_Probability")
    ori_p = doc.get("ori_Probability")
    try:
        return Correspondence(
            record_class=klass,
            stage=str(doc.get("Stage", "")),
            pos_id=pos_id,
            pos_probability=None if pos_p is None else _parse_probability(pos_p, f"{path}.pos_Probability"),
            ori_id=ori_id,
            ori_probability=None if ori_p is None else _parse_probability(ori_p, f"{path}.ori_Probability"),
            description=str(doc.get("Description", "")),
            pos=_parse_vector(doc.get("Pos"), POS_PLACEHOLDER, f"{path}.Pos"),
            orientation=_parse_vector(doc.get("Orientation"), ORI_PLACEHOLDER, f"{path}.Orientation"),
        )
    except MalformedEntry as exc:
        if exc.reason.startswith(path):
            raise
        raise MalformedEntry(f"{path}: {exc.reason}") from exc


def parse_annotation(data: bytes | str) -> AnnotationRecord:
    """Inverse of serialize_annotation; also accepts bare class-grouped JSON."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError("top level must be a JSON object", offset=0)

    class_names = {k.value: k for k in RecordClass}
    envelope = {"pasg_schema", "object_id", "frame", "keypoints"}
    unknown = set(doc) - envelope - set(class_names)
    if unknown:
        raise SchemaError(f"unknown record classes or keys: {sorted(unknown)}")

    record = AnnotationRecord(object_id=str(doc.get("object_id", "")))
    if "frame" in doc:
        f = doc["frame"]
        try:
            record.frame = FrameRecord(
                origin=tuple(float(v) for v in f["origin"]),
                x_axis=tuple(float(v) for v in f["x_axis"]),
                y_axis=tuple(float(v) for v in f["y_axis"]),
                z_axis=tuple(float(v) for v in f["z_axis"]),
                calibration=str(f.get("calibration", "default_kept")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"frame: {exc}", path="frame") from exc
    for i, k in enumerate(doc.get("keypoints", [])):
        try:
            record.keypoints.append(
                KeypointRecord(
                    index=int(k["index"]),
                    pos=tuple(float(v) for v in k["pos"]),
                    source=str(k.get("source", "")),
                    support=list(k.get("support", [])),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"keypoints[{i}]: {exc}", path=f"keypoints[{i}]") from exc
    for klass in RECORD_CLASS_ORDER:
        for i, entry in enumerate(doc.get(klass.value, [])):
            record.correspondences.append(parse_entry(entry, klass, f"{klass.value}[{i}]"))
    return record
