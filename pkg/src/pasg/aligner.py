"""Prompt construction, provider transport, and response parsing.

The two prompt templates are versioned byte-committed assets; builders
never inject object-specific text beyond the designated slot. The
identify response is parsed leniently (models wrap code blocks in prose),
the alignment response strictly (the prompt demands bare JSON).
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import requests

from .errors import (
    AuthFailure,
    MalformedEntry,
    NoStructuredBlock,
    ParseError,
    ProviderTimeout,
    ProviderUnavailable,
    SchemaError,
)
from .semantics import (
    Correspondence,
    InteractionPrimitive,
    PrimitiveConstraint,
    RecordClass,
    Subgoal,
    TaskSpec,
    parse_entry,
)

ALIGNMENT_SLOT = "{{SEMANTIC_ANNOTATIONS}}"
DEFAULT_MAX_IN_FLIGHT = 4


def load_template(name: str) -> str:
    return resources.files("pasg.prompts").joinpath(name).read_text(encoding="utf-8")


def template_digest(name: str) -> str:
    return hashlib.sha256(load_template(name).encode("utf-8")).hexdigest()


@dataclass
class PromptBundle:
    text: str
    images: list

    def digest(self) -> str:
        h = hashlib.sha256(self.text.encode("utf-8"))
        for img in self.images:
            h.update(repr(img).encode("utf-8"))
        return h.hexdigest()


def build_identify_prompt(overlays: list) -> PromptBundle:
    """Annotate-stage prompt: the committed template plus image attachments."""
    if not overlays:
        raise ValueError("identify prompt needs at least one overlay image")
    return PromptBundle(text=load_template("annotate_prompt.txt"), images=list(overlays))


def render_key_primitives(primitives: list[InteractionPrimitive]) -> str:
    lines = ["key_primitives = ["]
    for p in primitives:
        lines.append(
            "    {Type: %s, Pos: [x, y, z], Orientation: [dx, dy, dz], "
            'Stage: "%s", Description: "%s"},' % (p.klass.value, p.stage, p.structure)
        )
    lines.append("]")
    return "\n".join(lines)


def build_alignment_prompt(semantics, overlays: list) -> PromptBundle:
    """Alignment-stage prompt with the semantic list in the template slot.

    ``semantics`` is either the task decomposition (whose constraints are
    unioned into the primitive set) or a flat primitive list.
    """
    primitives = list(semantics)
    if primitives and isinstance(primitives[0], TaskSpec):
        from .semantics import unify_primitives

        unified = unify_primitives(primitives)
        primitives = unified.points + unified.axes
    if not primitives:
        raise ValueError("alignment prompt needs a non-empty semantic primitive list")
    if not overlays:
        raise ValueError("alignment prompt needs at least one overlay image")
    template = load_template("alignment_prompt.txt")
    text = template.replace(ALIGNMENT_SLOT, render_key_primitives(primitives))
    return PromptBundle(text=text, images=list(overlays))


# --- identify-response parsing ----------------------------------------------

_TYPE_RE = re.compile(r'["\']?Type["\']?\s*:\s*["\']?([A-Za-z_]+)["\']?')
_STAGE_RE = re.compile(r'["\']?Stage["\']?\s*:\s*"([^"]*)"')
_DESC_RE = re.compile(r'["\']?Description["\']?\s*:\s*"([^"]*)"')
_STAGES_LINE_RE = re.compile(r"(\d+)\s+stages?\s*:\s*((?:[^\"\n]*\"[^\"]*\")+)")


@dataclass
class IdentifyResult:
    tasks: list[TaskSpec]
    primitives: list[InteractionPrimitive]


def _extract_entries(text: str) -> list[str]:
    """Brace-matched entry strings of the key_primitives block."""
    anchor = text.find("key_primitives")
    if anchor < 0:
        raise NoStructuredBlock("no key_primitives block in response")
    open_bracket = text.find("[", anchor)
    if open_bracket < 0:
        raise NoStructuredBlock("key_primitives block has no list")
    entries = []
    depth = 0  # brace depth inside an entry
    square = 1  # bracket depth of the surrounding list
    start = None
    for i in range(open_bracket + 1, len(text)):
        ch = text[i]
        if depth == 0:
            if ch == "[":
                square += 1
            elif ch == "]":
                square -= 1
                if square == 0:
                    break
            elif ch == "{":
                start = i
                depth = 1
        else:
            # brackets inside an entry are placeholder vectors; ignore them
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    entries.append(text[start : i + 1])
                    start = None
    return entries


def _parse_primitive(entry: str, index: int) -> InteractionPrimitive:
    m = _TYPE_RE.search(entry)
    if not m:
        raise MalformedEntry(f"entry {index}: missing Type", index=index)
    try:
        klass = RecordClass(m.group(1).capitalize())
    except ValueError:
        raise MalformedEntry(f"entry {index}: unknown Type {m.group(1)!r}", index=index)
    stage = _STAGE_RE.search(entry)
    desc = _DESC_RE.search(entry)
    return InteractionPrimitive(
        klass=klass,
        structure=desc.group(1) if desc else "",
        function=stage.group(1) if stage else "",
        stage=stage.group(1) if stage else "",
    )


def _parse_task_stages(text: str) -> list[tuple[str, list[str]]]:
    tasks = []
    for m in _STAGES_LINE_RE.finditer(text):
        stages = re.findall(r'"([^"]*)"', m.group(2))
        if not stages:
            continue
        # Task description: nearest preceding quoted string ending in a colon.
        head = text[: m.start()]
        names = re.findall(r'"([^"\n]+)"\s*:', head)
        name = names[-1] if names else f"task {len(tasks) + 1}"
        tasks.append((name, stages))
    return tasks


def parse_identify_response(text: str) -> IdentifyResult:
    """Extract the key_primitives block and the task stage decomposition.

    Tolerates surrounding prose, field reordering, and the literal
    [x, y, z] placeholders the prompt mandates.
    """
    if not text or not text.strip():
        raise NoStructuredBlock("empty identify response")
    entries = _extract_entries(text)
    primitives = [_parse_primitive(e, i) for i, e in enumerate(entries)]

    tasks: list[TaskSpec] = []
    by_stage: dict[str, list[InteractionPrimitive]] = {}
    for p in primitives:
        by_stage.setdefault(p.stage.strip().casefold(), []).append(p)
    for ti, (name, stages) in enumerate(_parse_task_stages(text)):
        subgoals = []
        for si, stage in enumerate(stages):
            matched = tuple(by_stage.get(stage.strip().casefold(), ()))
            constraint = PrimitiveConstraint(points=matched, axes=(), description=stage)
            subgoals.append(
                Subgoal(goal_id=f"g{ti + 1}{si + 1}", stage_name=stage, constraint=constraint)
            )
        if subgoals:
            tasks.append(TaskSpec(task_id=f"t{ti + 1}", description=name, subgoals=tuple(subgoals)))
    return IdentifyResult(tasks=tasks, primitives=primitives)


# --- alignment-response parsing ---------------------------------------------

_FENCE_RE = re.compile(r"^```[a-zA-Z]*\n(.*)\n```$", re.DOTALL)


def parse_alignment_response(text: str) -> list[Correspondence]:
    """Strictly parse the class-grouped alignment JSON.

    Every candidate entry is preserved; out-of-range probabilities are
    rejected, never clamped.
    """
    stripped = text.strip()
    fence = _FENCE_RE.match(stripped)
    if fence:
        stripped = fence.group(1).strip()
    try:
        doc = json.loads(stripped)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError("alignment response must be a JSON object", offset=0)
    class_names = {k.value: k for k in RecordClass}
    unknown = set(doc) - set(class_names)
    if unknown:
        raise SchemaError(f"unknown record classes: {sorted(unknown)}")
    out: list[Correspondence] = []
    for name, klass in class_names.items():
        if name not in doc:
            continue
        if not isinstance(doc[name], list):
            raise SchemaError(f"{name} must hold a list of entries")
        for i, entry in enumerate(doc[name]):
            out.append(parse_entry(entry, klass, f"{name}[{i}]"))
    return out


# --- providers ---------------------------------------------------------------

class TransportError(Exception):
    """Retryable transport-level failure (connection, 5xx, rate limit)."""


class ScriptedAligner:
    """Deterministic mock: replays a committed response sequence.

    Script items are either response strings or exception instances to
    raise. Thread-safe; every call is recorded.
    """

    def __init__(self, script: list):
        self._script = list(script)
        self._lock = threading.Lock()
        self.calls: list[dict] = []

    def send(self, prompt: str, images: list, timeout: float) -> str:
        with self._lock:
            if not self._script:
                raise ProviderUnavailable("scripted aligner exhausted")
            item = self._script.pop(0)
            self.calls.append(
                {
                    "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
                    "n_images": len(images),
                    "outcome": "error" if isinstance(item, Exception) else "ok",
                }
            )
        if isinstance(item, Exception):
            raise item
        return item


class HttpAligner:
    """Minimal JSON-over-HTTP provider client.

    Request: ``{"model", "prompt", "images": [base64...]}``; response:
    ``{"text": ...}``. Credentials come from PASG_VLM_API_KEY.
    """

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 max_in_flight: int = DEFAULT_MAX_IN_FLIGHT, session=None):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("PASG_VLM_API_KEY", "")
        self._gate = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()

    @staticmethod
    def _encode_image(img) -> str:
        if isinstance(img, (bytes, bytearray)):
            raw = bytes(img)
        else:
            raw = Path(img).read_bytes()
        return base64.b64encode(raw).decode("ascii")

    def send(self, prompt: str, images: list, timeout: float) -> str:
        payload = {
            "model": self.model,
            "prompt": prompt,
            "images": [self._encode_image(i) for i in images],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        with self._gate:
            try:
                resp = self._session.post(
                    self.endpoint, json=payload, headers=headers, timeout=timeout
                )
            except requests.Timeout as exc:
                raise ProviderTimeout(str(exc)) from exc
            except requests.RequestException as exc:
                raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthFailure(f"provider rejected credentials ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"status {resp.status_code}")
        try:
            return resp.json()["text"]
        except (ValueError, KeyError) as exc:
            raise TransportError(f"malformed provider response: {exc}") from exc


@dataclass
class Transcript:
    """JSON Lines request/response log."""

    path: Path
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def log(self, event: dict):
        line = json.dumps(event, ensure_ascii=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


_request_counter = [0]
_request_lock = threading.Lock()


def _next_request_id() -> str:
    with _request_lock:
        _request_counter[0] += 1
        return f"req-{_request_counter[0]:06d}"


def query(
    provider,
    prompt: str,
    images: list,
    max_retries: int = 3,
    base_delay: float = 1.0,
    timeout: float = 120.0,
    sleeper=time.sleep,
    transcript: Transcript | None = None,
    request_id: str | None = None,
) -> str:
    """Send one prompt with exponential backoff on transport failures.

    At most ``max_retries`` retries after the first attempt; auth failures
    never retry. Timeouts count as retryable transport errors, and the
    last one surfaces as ProviderTimeout.
    """
    rid = request_id or _next_request_id()
    last_error: Exception | None = None
    for attempt in range(max_retries + 1):
        if attempt:
            sleeper(base_delay * (2 ** (attempt - 1)))
        try:
            text = provider.send(prompt, images, timeout)
        except AuthFailure:
            if transcript:
                transcript.log({"request_id": rid, "attempt": attempt, "outcome": "auth_failure"})
            raise
        except (TransportError, ProviderTimeout, ProviderUnavailable) as exc:
            last_error = exc
            if transcript:
                transcript.log(
                    {"request_id": rid, "attempt": attempt, "outcome": "error",
                     "error": f"{type(exc).__name__}: {exc}"}
                )
            continue
        if transcript:
            transcript.log(
                {
                    "request_id": rid,
                    "attempt": attempt,
                    "outcome": "ok",
                    "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
                    "n_images": len(images),
                    "response_chars": len(text),
                }
            )
        return text
    if isinstance(last_error, ProviderTimeout):
        raise last_error
    raise ProviderUnavailable(
        f"{max_retries} retries exhausted ({type(last_error).__name__}: {last_error})"
    )
