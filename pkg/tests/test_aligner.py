import json

import pytest

from pasg.aligner import (
    ScriptedAligner,
    TransportError,
    build_alignment_prompt,
    build_identify_prompt,
    load_template,
    parse_alignment_response,
    parse_identify_response,
    query,
    template_digest,
)
from pasg.errors import (
    AuthFailure,
    MalformedEntry,
    NoStructuredBlock,
    ParseError,
    ProviderUnavailable,
    SchemaError,
)
from pasg.semantics import InteractionPrimitive, MatchToken, RecordClass

# Committed template assets are pinned by digest; an intentional template
# change must update these.
ANNOTATE_SHA256 = "5b925f28f0ff74d31fd582edf7446646cb3da5e4ca6f710da05f677ebdf927d6"
ALIGNMENT_SHA256 = "3be67595344bbed5be513c328656c269973fa7ba649eeb2e14ffa0895e79ad80"

TEAPOT_RESPONSE = '''
Important parts of the Teapot: body, lid, handle, spout, base.

Task Stages
- "pouring tea from teapot":
  - 3 stages: "grasp teapot", "align teapot with cup opening", and "pour liquid"

key_primitives = [
    {Type: Main, Pos: [x, y, z], Orientation: [dx, dy, dz], Stage: "Pour Liquid", Description: "Global reference for maintaining proper pouring orientation"},
    {Type: Grasp, Pos: [x, y, z], Orientation: [dx, dy, dz], Stage: "Grasp Teapot", Description: "Grasping the teapot handle for secure hold"},
    {Type: Anchor, Pos: [x, y, z], Orientation: [dx, dy, dz], Stage: "Align Teapot with Cup Opening", Description: "Reference point and axis for positioning the teapot relative to the cup"}
]
'''


def grasp_prim():
    return InteractionPrimitive(
        klass=RecordClass.GRASP, structure="Grasping the teapot handle",
        function="Grasp Teapot", stage="Grasp Teapot",
    )


class TestPromptBuilders:
    def test_identify_prompt_is_template_verbatim(self):
        bundle = build_identify_prompt(["a.png", "b.png", "c.png"])
        assert bundle.text == load_template("annotate_prompt.txt")
        assert len(bundle.images) == 3

    def test_identify_requires_overlays(self):
        with pytest.raises(ValueError):
            build_identify_prompt([])

    def test_template_digests_pinned(self):
        assert template_digest("annotate_prompt.txt") == ANNOTATE_SHA256
        assert template_digest("alignment_prompt.txt") == ALIGNMENT_SHA256

    def test_alignment_prompt_fills_slot_deterministically(self):
        a = build_alignment_prompt([grasp_prim()], ["x.png"])
        b = build_alignment_prompt([grasp_prim()], ["x.png"])
        assert a.text == b.text
        assert "{{SEMANTIC_ANNOTATIONS}}" not in a.text
        assert 'Stage: "Grasp Teapot"' in a.text
        # the template body itself is unchanged around the slot
        template = load_template("alignment_prompt.txt")
        head = template.split("{{SEMANTIC_ANNOTATIONS}}")[0]
        assert a.text.startswith(head)

    def test_alignment_requires_semantics_and_overlays(self):
        with pytest.raises(ValueError):
            build_alignment_prompt([], ["x.png"])
        with pytest.raises(ValueError):
            build_alignment_prompt([grasp_prim()], [])

    def test_alignment_accepts_task_decomposition(self):
        from pasg.semantics import PrimitiveConstraint, Subgoal, TaskSpec

        task = TaskSpec(
            task_id="t1", description="pour",
            subgoals=(
                Subgoal(goal_id="g11", stage_name="Grasp Teapot",
                        constraint=PrimitiveConstraint(points=(grasp_prim(),), axes=())),
            ),
        )
        from_tasks = build_alignment_prompt([task], ["x.png"])
        from_prims = build_alignment_prompt([grasp_prim()], ["x.png"])
        assert from_tasks.text == from_prims.text


class TestParseIdentify:
    def test_teapot_example_block(self):
        result = parse_identify_response(TEAPOT_RESPONSE)
        klasses = [p.klass for p in result.primitives]
        assert klasses == [RecordClass.MAIN, RecordClass.GRASP, RecordClass.ANCHOR]
        assert len(result.tasks) == 1
        task = result.tasks[0]
        assert task.description == "pouring tea from teapot"
        assert [s.stage_name for s in task.subgoals] == [
            "grasp teapot", "align teapot with cup opening", "pour liquid"]
        # stage constraints picked up the matching primitives
        assert [p.klass for p in task.subgoals[0].constraint.points] == [RecordClass.GRASP]
        assert [p.klass for p in task.subgoals[2].constraint.points] == [RecordClass.MAIN]

    def test_empty_text_raises(self):
        with pytest.raises(NoStructuredBlock):
            parse_identify_response("")

    def test_prose_without_block_raises(self):
        with pytest.raises(NoStructuredBlock):
            parse_identify_response("The object is a teapot used for pouring.")

    def test_whitespace_and_field_order_fuzz(self):
        variants = [
            TEAPOT_RESPONSE,
            TEAPOT_RESPONSE.replace("{Type: Main,", "{  Type:   Main ,"),
            TEAPOT_RESPONSE.replace(
                '{Type: Grasp, Pos: [x, y, z], Orientation: [dx, dy, dz], Stage: "Grasp Teapot", Description: "Grasping the teapot handle for secure hold"}',
                '{Stage: "Grasp Teapot", Type: Grasp, Description: "Grasping the teapot handle for secure hold", Pos: [x, y, z], Orientation: [dx, dy, dz]}',
            ),
            "Sure! Here is the analysis you asked for.\n" + TEAPOT_RESPONSE + "\nLet me know.",
        ]
        baseline = parse_identify_response(TEAPOT_RESPONSE)
        for text in variants:
            got = parse_identify_response(text)
            assert [p.klass for p in got.primitives] == [p.klass for p in baseline.primitives]
            assert [p.stage for p in got.primitives] == [p.stage for p in baseline.primitives]
            assert [t.description for t in got.tasks] == [t.description for t in baseline.tasks]

    def test_quoted_fields_accepted(self):
        text = 'key_primitives = [\n    {"Type": "Grasp", "Stage": "hold it", "Description": "grip"},\n]'
        result = parse_identify_response(text)
        assert result.primitives[0].klass is RecordClass.GRASP
        assert result.primitives[0].stage == "hold it"


class TestParseAlignment:
    def test_paper_format_example(self):
        text = ('{"Grasp":[{"Stage":"Grasp Teapot","pos_ID":3,"pos_Probability":0.85,'
                '"ori_ID":[1,3],"ori_Probability":0.7,"Pos":"[x, y, z]",'
                '"Orientation":"[dx, dy, dz]","Description":"handle"}]}')
        corrs = parse_alignment_response(text)
        assert len(corrs) == 1
        c = corrs[0]
        assert c.record_class is RecordClass.GRASP
        assert c.pos_id == 3 and c.pos_probability == 0.85
        assert c.ori_id == (1, 3) and c.ori_probability == 0.7

    def test_none_token(self):
        corrs = parse_alignment_response(
            '{"Anchor":[{"Stage":"s","pos_ID":"None","ori_ID":[0,0,1],"ori_Probability":0.9}]}'
        )
        assert corrs[0].pos_id is MatchToken.NONE
        assert corrs[0].pos_probability is None

    def test_out_of_range_probability_rejected_not_clamped(self):
        with pytest.raises(MalformedEntry):
            parse_alignment_response(
                '{"Grasp":[{"Stage":"s","pos_ID":1,"pos_Probability":1.3,"ori_ID":"None"}]}'
            )

    def test_multiple_candidates_preserved(self):
        text = json.dumps({
            "Grasp": [
                {"Stage": "s", "pos_ID": 1, "pos_Probability": 0.8, "ori_ID": "None"},
                {"Stage": "s", "pos_ID": 2, "pos_Probability": 0.6, "ori_ID": "None"},
                {"Stage": "s", "pos_ID": 2, "pos_Probability": 0.6, "ori_ID": "None"},
            ]
        })
        assert len(parse_alignment_response(text)) == 3

    def test_markdown_fence_tolerated(self):
        corrs = parse_alignment_response(
            '```json\n{"Main":[{"Stage":"s","pos_ID":1,"pos_Probability":0.9,"ori_ID":"None"}]}\n```'
        )
        assert corrs[0].record_class is RecordClass.MAIN

    def test_unknown_class_raises_schema_error(self):
        with pytest.raises(SchemaError):
            parse_alignment_response('{"Pivot": []}')

    def test_broken_json_raises_parse_error(self):
        with pytest.raises(ParseError):
            parse_alignment_response('{"Grasp": [')


class TestQueryRetries:
    def test_single_canned_response(self):
        provider = ScriptedAligner(["hello"])
        assert query(provider, "p", [], sleeper=lambda s: None) == "hello"
        assert len(provider.calls) == 1

    def test_fail_twice_then_succeed(self):
        provider = ScriptedAligner([TransportError("a"), TransportError("b"), "ok"])
        assert query(provider, "p", [], sleeper=lambda s: None) == "ok"
        assert len(provider.calls) == 3

    def test_exhaustion_after_three_retries(self):
        provider = ScriptedAligner([TransportError(str(i)) for i in range(4)])
        with pytest.raises(ProviderUnavailable):
            query(provider, "p", [], sleeper=lambda s: None)
        assert len(provider.calls) == 4  # 1 attempt + 3 retries

    def test_backoff_schedule(self):
        delays = []
        provider = ScriptedAligner([TransportError("x")] * 3 + ["done"])
        query(provider, "p", [], sleeper=delays.append)
        assert delays == [1.0, 2.0, 4.0]

    def test_auth_failure_never_retried(self):
        provider = ScriptedAligner([AuthFailure("bad key"), "never reached"])
        with pytest.raises(AuthFailure):
            query(provider, "p", [], sleeper=lambda s: None)
        assert len(provider.calls) == 1

    def test_transcript_logging(self, tmp_path):
        from pasg.aligner import Transcript

        t = Transcript(tmp_path / "log.jsonl")
        provider = ScriptedAligner([TransportError("x"), "fine"])
        query(provider, "p", ["img"], sleeper=lambda s: None, transcript=t, request_id="req-test")
        lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [l["outcome"] for l in lines] == ["error", "ok"]
        assert all(l["request_id"] == "req-test" for l in lines)


class FakeResponse:
    def __init__(self, status_code, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("no json body")
        return self._body


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def post(self, url, **kwargs):
        self.requests.append((url, kwargs))
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class TestHttpAligner:
    def _aligner(self, responses, key="secret-key"):
        from pasg.aligner import HttpAligner

        session = FakeSession(responses)
        return HttpAligner("http://vlm.test/v1", "model-x", api_key=key, session=session), session

    def test_payload_and_auth_header(self, tmp_path):
        img = tmp_path / "i.bin"
        img.write_bytes(b"\x89PNGfake")
        aligner, session = self._aligner([FakeResponse(200, {"text": "hi"})])
        assert aligner.send("prompt text", [img], timeout=5) == "hi"
        url, kwargs = session.requests[0]
        assert url == "http://vlm.test/v1"
        assert kwargs["headers"]["Authorization"] == "Bearer secret-key"
        payload = kwargs["json"]
        assert payload["model"] == "model-x"
        assert payload["prompt"] == "prompt text"
        import base64

        assert base64.b64decode(payload["images"][0]) == b"\x89PNGfake"

    def test_auth_failure_not_retried(self):
        aligner, session = self._aligner([FakeResponse(401)])
        with pytest.raises(AuthFailure):
            query(aligner, "p", [], sleeper=lambda s: None)
        assert len(session.requests) == 1

    def test_rate_limit_retried_then_exhausted(self):
        aligner, session = self._aligner([FakeResponse(429)] * 4)
        with pytest.raises(ProviderUnavailable):
            query(aligner, "p", [], sleeper=lambda s: None)
        assert len(session.requests) == 4

    def test_server_error_then_success(self):
        aligner, _ = self._aligner([FakeResponse(502), FakeResponse(200, {"text": "ok"})])
        assert query(aligner, "p", [], sleeper=lambda s: None) == "ok"

    def test_api_key_from_environment(self, monkeypatch):
        from pasg.aligner import HttpAligner

        monkeypatch.setenv("PASG_VLM_API_KEY", "env-key")
        session = FakeSession([FakeResponse(200, {"text": "x"})])
        aligner = HttpAligner("http://vlm.test/v1", "m", session=session)
        aligner.send("p", [], timeout=5)
        assert session.requests[0][1]["headers"]["Authorization"] == "Bearer env-key"


class TestParserTotality:
    # every input maps to a parse result or a typed error, never a crash
    GARBAGE = [
        "", "   ", "{", "[1, 2, 3]", "null", '"just a string"',
        '{"Grasp": 3}', '{"Grasp": [42]}', '{"Grasp": [{"pos_ID": {}}]}',
        "key_primitives = [", "key_primitives = [{]}",
        "\x00\x01\x02", "{Type: }", '{"Main": [{"Stage": 5, "pos_ID": 1.5}]}',
    ]

    def test_alignment_parser_total(self):
        from pasg.errors import PasgError

        for text in self.GARBAGE:
            try:
                parse_alignment_response(text)
            except PasgError:
                pass

    def test_identify_parser_total(self):
        from pasg.errors import PasgError

        for text in self.GARBAGE:
            try:
                parse_identify_response(text)
            except PasgError:
                pass


class TestScriptedMockConcurrency:
    def test_each_item_served_exactly_once_under_threads(self):
        import threading

        n = 64
        provider = ScriptedAligner([f"resp-{i}" for i in range(n)])
        results = []
        lock = threading.Lock()

        def worker():
            text = provider.send("p", [], 1.0)
            with lock:
                results.append(text)

        threads = [threading.Thread(target=worker) for _ in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == sorted(f"resp-{i}" for i in range(n))
        assert len(provider.calls) == n
