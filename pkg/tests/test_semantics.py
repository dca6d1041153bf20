import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pasg.errors import MalformedEntry, ParseError, SchemaError
from pasg.semantics import (
    DANGLING_REF,
    LOW_CONFIDENCE,
    OK,
    UNMATCHED,
    AnnotationRecord,
    Correspondence,
    FrameRecord,
    InteractionPrimitive,
    KeypointRecord,
    MatchToken,
    PrimitiveConstraint,
    RecordClass,
    Subgoal,
    TaskSpec,
    parse_annotation,
    resolve_record,
    serialize_annotation,
    unify_primitives,
    validate_correspondences,
)

from helpers import GOLDEN


def prim(name, klass=RecordClass.GRASP, stage="stage A"):
    return InteractionPrimitive(klass=klass, structure=name, function=stage, stage=stage)


def task(task_id, *subgoal_prims, stages=None):
    subgoals = []
    for i, prims in enumerate(subgoal_prims):
        stage = (stages or [f"s{i}"] * len(subgoal_prims))[i]
        subgoals.append(
            Subgoal(
                goal_id=f"g{task_id}{i}",
                stage_name=stage,
                constraint=PrimitiveConstraint(points=tuple(prims), axes=()),
            )
        )
    return TaskSpec(task_id=task_id, description=task_id, subgoals=tuple(subgoals))


class TestTaxonomy:
    def test_record_classes_map_onto_point_axis_taxonomy(self):
        from pasg.semantics import RECORD_TAXONOMY, AxisClass, PointClass

        assert RECORD_TAXONOMY[RecordClass.MAIN] == (None, AxisClass.PRIMARY)
        assert RECORD_TAXONOMY[RecordClass.ANCHOR] == (PointClass.ANCHOR, AxisClass.FUNCTIONAL)
        assert RECORD_TAXONOMY[RecordClass.GRASP] == (PointClass.GRASP, AxisClass.APPROACH)
        assert RECORD_TAXONOMY[RecordClass.ACTUATION] == (PointClass.ACTUATION, AxisClass.APPROACH)
        assert RECORD_TAXONOMY[RecordClass.HINGE] == (PointClass.ACTUATION, AxisClass.FUNCTIONAL)
        assert set(RECORD_TAXONOMY) == set(RecordClass)


class TestUnifyPrimitives:
    def test_singleton(self):
        p = prim("handle")
        u = unify_primitives([task("t1", [p])])
        assert u.points == [p]
        assert u.provenance[p] == [("t1", "gt10")]

    def test_shared_point_unions_once_with_two_provenances(self):
        p = prim("handle")
        u = unify_primitives([task("t1", [p], [p])])
        assert len(u.points) == 1
        assert len(u.provenance[p]) == 2

    def test_random_trees_match_flat_dedup(self):
        import random

        rng = random.Random(5)
        pool = [prim(f"p{i}", stage=f"st{i % 4}") for i in range(8)]
        for _ in range(30):
            tasks = []
            flat = []
            for ti in range(rng.randint(1, 4)):
                groups = []
                for si in range(rng.randint(1, 3)):
                    chosen = rng.sample(pool, rng.randint(1, 4))
                    groups.append(chosen)
                    flat.extend(chosen)
                tasks.append(task(f"t{ti}", *groups))
            u = unify_primitives(tasks)
            assert len(u.points) == len(set(flat))

    def test_union_properties_idempotent_commutative_associative(self):
        a = task("a", [prim("x")], [prim("y", stage="s1")])
        b = task("b", [prim("y", stage="s1")], [prim("z", stage="s2")])
        c = task("c", [prim("x")], [prim("w", stage="s3")])
        u1 = unify_primitives([a, b])
        u2 = unify_primitives([b, a])
        assert set(u1.points) == set(u2.points)
        assert set(unify_primitives([a, a]).points) == set(unify_primitives([a]).points)
        # associativity: any grouping of the task list unions to the same set
        flat = set(unify_primitives([a, b, c]).points)
        left = set(unify_primitives([a, b]).points) | set(unify_primitives([c]).points)
        right = set(unify_primitives([a]).points) | set(unify_primitives([b, c]).points)
        assert flat == left == right


def corr(klass=RecordClass.GRASP, stage="Grasp Teapot", pos_id=1, pos_p=0.9,
         ori_id=(0, 0, 1), ori_p=0.9, description="d"):
    return Correspondence(
        record_class=klass, stage=stage, pos_id=pos_id, pos_probability=pos_p,
        ori_id=ori_id, ori_probability=ori_p, description=description,
    )


def record_with(corrs, n_kp=10):
    return AnnotationRecord(
        object_id="obj",
        frame=FrameRecord((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)),
        keypoints=[
            KeypointRecord(index=i, pos=(float(i), 0.0, 0.0), source="centroid",
                           support=[{"view_id": 0, "x": 1.0, "y": 2.0, "source": "centroid"}])
            for i in range(1, n_kp + 1)
        ],
        correspondences=corrs,
    )


class TestValidate:
    def test_all_ok(self):
        rep = validate_correspondences(record_with([corr(), corr(pos_id=2)]))
        assert rep.statuses == [OK, OK]
        assert rep.all_ok()

    def test_low_confidence_below_half(self):
        rep = validate_correspondences(record_with([corr(pos_p=0.4)]))
        assert rep.statuses == [LOW_CONFIDENCE]

    def test_exactly_half_passes(self):
        rep = validate_correspondences(record_with([corr(pos_p=0.5)]))
        assert rep.statuses == [OK]

    def test_unmatched_tokens(self):
        c = corr(pos_id=MatchToken.NONE, pos_p=None)
        rep = validate_correspondences(record_with([c]))
        assert rep.statuses == [UNMATCHED]

    def test_dangling_reference(self):
        rep = validate_correspondences(record_with([corr(pos_id=99)]))
        assert rep.statuses == [DANGLING_REF]

    def test_dangling_in_ori_pair(self):
        rep = validate_correspondences(record_with([corr(ori_id=(1, 42), ori_p=0.9)]))
        assert rep.statuses == [DANGLING_REF]

    def test_low_set_lists_non_ok(self):
        rep = validate_correspondences(
            record_with([corr(), corr(pos_p=0.3), corr(pos_id=MatchToken.ERROR, pos_p=None)])
        )
        assert rep.low_set() == [1, 2]


class TestCorrespondenceInvariants:
    def test_probability_without_match_rejected(self):
        with pytest.raises(MalformedEntry):
            Correspondence(RecordClass.GRASP, "s", MatchToken.NONE, 0.5, (0, 0, 1), 0.9)

    def test_match_without_probability_rejected(self):
        with pytest.raises(MalformedEntry):
            Correspondence(RecordClass.GRASP, "s", 1, None, (0, 0, 1), 0.9)

    def test_non_unit_axis_rejected(self):
        with pytest.raises(MalformedEntry):
            corr(ori_id=(0, 1, 1))

    def test_probability_range(self):
        with pytest.raises(MalformedEntry):
            corr(pos_p=1.2)


class TestSerialization:
    def test_empty_record_is_bare_object(self):
        assert serialize_annotation(AnnotationRecord()) == b"{}\n"

    def test_golden_skeleton_byte_exact(self):
        golden = (GOLDEN / "alignment_skeleton.annotation.json").read_bytes()
        record = parse_annotation(golden)
        assert serialize_annotation(record) == golden

    def test_fixed_class_order_regardless_of_insertion(self):
        a = record_with([corr(RecordClass.HINGE, "h"), corr(RecordClass.MAIN, "m", pos_id=2)])
        b = record_with([corr(RecordClass.MAIN, "m", pos_id=2), corr(RecordClass.HINGE, "h")])
        assert serialize_annotation(a) == serialize_annotation(b)
        doc = json.loads(serialize_annotation(a))
        keys = [k for k in doc if k in {"Main", "Anchor", "Grasp", "Actuation", "Hinge"}]
        assert keys == ["Main", "Hinge"]

    def test_placeholders_serialized_literally(self):
        doc = json.loads(serialize_annotation(record_with([corr()])))
        entry = doc["Grasp"][0]
        assert entry["Pos"] == "[x, y, z]"
        assert entry["Orientation"] == "[dx, dy, dz]"
        assert list(entry) == ["Stage", "pos_ID", "pos_Probability", "ori_ID",
                               "ori_Probability", "Pos", "Orientation", "Description"]

    def test_probability_rendering(self):
        text = serialize_annotation(record_with([corr(pos_p=0.7, ori_p=1.0)])).decode()
        assert '"pos_Probability": 0.7' in text
        assert '"ori_Probability": 1.0' in text

    def test_unknown_class_rejected(self):
        with pytest.raises(SchemaError):
            parse_annotation(b'{"Pivot": []}')

    def test_parse_error_carries_offset(self):
        with pytest.raises(ParseError) as err:
            parse_annotation(b'{"Grasp": [}')
        assert err.value.offset is not None

    def test_bare_class_grouped_form_accepted(self):
        rec = parse_annotation(b'{"Grasp": [{"Stage": "s", "pos_ID": "None", "ori_ID": "Error"}]}')
        assert rec.correspondences[0].pos_id is MatchToken.NONE
        assert rec.correspondences[0].ori_id is MatchToken.ERROR


_tokens = st.sampled_from([MatchToken.NONE, MatchToken.ERROR])
_prob = st.integers(0, 100).map(lambda v: v / 100.0)
_pos = st.one_of(st.integers(1, 12), _tokens)
_sym = st.sampled_from([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)])
_ori = st.one_of(st.tuples(st.integers(1, 12), st.integers(1, 12)), _sym, _tokens)
_text = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=24)


@st.composite
def correspondences(draw):
    pos_id = draw(_pos)
    ori_id = draw(_ori)
    return Correspondence(
        record_class=draw(st.sampled_from(list(RecordClass))),
        stage=draw(_text),
        pos_id=pos_id,
        pos_probability=draw(_prob) if isinstance(pos_id, int) else None,
        ori_id=ori_id,
        ori_probability=draw(_prob) if isinstance(ori_id, tuple) else None,
        description=draw(_text),
    )


@st.composite
def records(draw):
    corrs = draw(st.lists(correspondences(), max_size=6))
    n_kp = draw(st.integers(0, 12))
    return AnnotationRecord(
        object_id=draw(st.sampled_from(["", "obj-1", "kettle"])),
        frame=None if draw(st.booleans()) else FrameRecord((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)),
        keypoints=[
            KeypointRecord(index=i, pos=(0.5 * i, 1.0, -2.0), source="centroid",
                           support=[{"view_id": 0, "x": 3.0, "y": 4.0, "source": "centroid"}])
            for i in range(1, n_kp + 1)
        ],
        correspondences=corrs,
    )


class TestRoundTripFuzz:
    @settings(max_examples=100, deadline=None)
    @given(records())
    def test_parse_serialize_identity(self, record):
        data = serialize_annotation(record)
        back = parse_annotation(data)
        assert back.object_id == record.object_id
        assert len(back.correspondences) == len(record.correspondences)
        # canonical form groups entries by class (stable within a class)
        order = {k: i for i, k in enumerate(RecordClass)}
        canonical = sorted(record.correspondences, key=lambda c: order[c.record_class])
        for a, b in zip(canonical, back.correspondences):
            assert a.record_class is b.record_class
            assert a.stage == b.stage
            assert a.pos_id == b.pos_id
            assert a.ori_id == b.ori_id
            assert a.pos_probability == pytest.approx(b.pos_probability)
            assert a.ori_probability == pytest.approx(b.ori_probability)
            assert a.description == b.description
        assert serialize_annotation(back) == data  # double-serialize stability

    @settings(max_examples=50, deadline=None)
    @given(records())
    def test_insertion_order_does_not_change_bytes(self, record):
        shuffled = AnnotationRecord(
            object_id=record.object_id,
            frame=record.frame,
            keypoints=record.keypoints,
            correspondences=list(reversed(record.correspondences)),
        )
        a = json.loads(serialize_annotation(record))
        b = json.loads(serialize_annotation(shuffled))
        # class grouping restores order; within-class order may flip, so
        # compare as multisets per class
        for klass in ("Main", "Anchor", "Grasp", "Actuation", "Hinge"):
            ea = a.get(klass, [])
            eb = b.get(klass, [])
            assert sorted(json.dumps(x, sort_keys=True) for x in ea) == sorted(
                json.dumps(x, sort_keys=True) for x in eb
            )


class TestResolve:
    def test_pos_filled_from_keypoint(self):
        rec = record_with([corr(pos_id=3)])
        resolve_record(rec)
        assert rec.correspondences[0].pos == (3.0, 0.0, 0.0)

    def test_symbolic_axis_resolves_in_frame(self):
        rec = record_with([corr(ori_id=(0, 0, -1), ori_p=0.8)])
        rec.frame = FrameRecord((0, 0, 0), (0, 1, 0), (-1, 0, 0), (0, 0, 1), calibration="rebuilt")
        resolve_record(rec)
        assert rec.correspondences[0].orientation == (0.0, 0.0, -1.0)

    def test_point_pair_resolves_to_unit_vector(self):
        rec = record_with([corr(ori_id=(1, 3), ori_p=0.8)])
        resolve_record(rec)
        assert rec.correspondences[0].orientation == (1.0, 0.0, 0.0)

    def test_serialized_resolved_fields_numeric(self):
        rec = record_with([corr(pos_id=2, ori_id=(1, 2), ori_p=0.9)])
        resolve_record(rec)
        doc = json.loads(serialize_annotation(rec))
        assert doc["Grasp"][0]["Pos"] == [2.0, 0.0, 0.0]
        assert doc["Grasp"][0]["Orientation"] == [1.0, 0.0, 0.0]
