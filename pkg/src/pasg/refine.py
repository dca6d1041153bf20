"""Closed-loop self-refining alignment.

One loop per object: evaluate confidences, collect the failing entries,
and either finish, give up, or escalate segmentation granularity and
re-align only what failed. The control flow below is the frozen contract:
the failure check runs after a non-empty low set and before escalation,
so the finest granularity gets exactly one alignment attempt.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

from .errors import PasgError
from .semantics import Correspondence, MatchToken


@dataclass
class RefineConfig:
    tau_max: int = 5
    low_conf_threshold: float = 0.5
    granularity_levels: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if self.tau_max < 1:
            raise ValueError("tau_max must be >= 1")
        if not (0.0 < self.low_conf_threshold < 1.0):
            raise ValueError("low_conf_threshold must be in (0, 1)")
        if not self.granularity_levels:
            raise ValueError("need at least one granularity level")
        levels = tuple(self.granularity_levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("granularity levels must strictly increase")
        self.granularity_levels = levels


class RefineHooks(Protocol):
    """Geometry and alignment callbacks the loop drives."""

    def resample(self, gamma: int, keep_ids: set[int]) -> set[int]:
        """Re-extract geometry at ``gamma``; returns the valid keypoint ids.

        ``keep_ids`` are keypoints referenced by already-accepted entries;
        their indices and positions must survive the resample.
        """

    def align(self, targets: list[Correspondence], gamma: int) -> list[Correspondence]:
        """Re-align only the failing entries against the current geometry."""


@dataclass
class RefineOutcome:
    status: str  # "refined" | "failed"
    correspondences: list[Correspondence]
    trace: list[dict]
    iterations: int
    gamma: int
    failure_cause: str | None = None

    @property
    def succeeded(self) -> bool:
        return self.status == "refined"


def find_low_confidence(
    corrs: list[Correspondence],
    threshold: float,
    known_ids: set[int] | None = None,
) -> list[int]:
    """Indices of entries that fail the gate.

    An entry fails when any of its probabilities is strictly below the
    threshold (0.5 exactly passes), any id is a NONE/ERROR token, or, when
    ``known_ids`` is given, any integer reference dangles.
    """
    low = []
    for i, c in enumerate(corrs):
        bad = isinstance(c.pos_id, MatchToken) or isinstance(c.ori_id, MatchToken)
        for p in (c.pos_probability, c.ori_probability):
            if p is not None and p < threshold:
                bad = True
        if known_ids is not None:
            refs = []
            if isinstance(c.pos_id, int):
                refs.append(c.pos_id)
            if isinstance(c.ori_id, tuple) and len(c.ori_id) == 2:
                refs.extend(c.ori_id)
            if any(r not in known_ids for r in refs):
                bad = True
        if bad:
            low.append(i)
    return low


def replace_low_conf(
    old: list[Correspondence],
    refreshed: list[Correspondence],
    low_indices: list[int],
) -> list[Correspondence]:
    """Swap failing entries for their refreshed versions, rest untouched.

    Matching is by semantic identity (record class, stage). A refreshed
    primitive replaces all of its failing candidates in place; primitives
    with no refreshed version keep their old entries and stay failing.
    """
    low = set(low_indices)
    fresh: dict[tuple[str, str], list[Correspondence]] = {}
    for c in refreshed:
        fresh.setdefault(c.semantic_key(), []).append(c)
    out: list[Correspondence] = []
    consumed: set[tuple[str, str]] = set()
    for i, c in enumerate(old):
        key = c.semantic_key()
        if i in low and key in fresh:
            if key not in consumed:
                out.extend(fresh[key])
                consumed.add(key)
        else:
            out.append(c)
    return out


def run_self_refine(
    initial: list[Correspondence],
    hooks: RefineHooks,
    cfg: RefineConfig,
    known_ids: set[int] | None = None,
    trace_sink: Callable[[dict], None] | None = None,
) -> RefineOutcome:
    """Drive the segment-align-detect-resample loop to a verdict.

    Bounded by ``cfg.tau_max`` iterations and the granularity ladder;
    provider errors surface as a failed outcome with their cause. The
    trace logs every decision, including which guard ended the run.
    """
    trace: list[dict] = []

    def emit(event: dict):
        trace.append(event)
        if trace_sink:
            trace_sink(event)

    levels = cfg.granularity_levels
    gamma_idx = 0
    corrs = list(initial)
    ids = set(known_ids) if known_ids is not None else None
    t = 0
    while t < cfg.tau_max:
        t += 1
        gamma = levels[gamma_idx]
        low = find_low_confidence(corrs, cfg.low_conf_threshold, ids)
        emit({
            "t": t, "gamma": gamma, "action": "match",
            "low_entries": [f"{corrs[i].record_class.value}:{corrs[i].stage}" for i in low],
        })
        if not low:
            emit({"t": t, "gamma": gamma, "action": "return", "outcome": "refined"})
            return RefineOutcome("refined", corrs, trace, t, gamma)
        if t == cfg.tau_max or gamma_idx == len(levels) - 1:
            guard = "tau_max" if t == cfg.tau_max else "gamma_max"
            emit({"t": t, "gamma": gamma, "action": "fail", "guard": guard})
            return RefineOutcome("failed", corrs, trace, t, gamma, failure_cause=guard)
        gamma_idx += 1
        gamma = levels[gamma_idx]
        emit({"t": t, "gamma": gamma, "action": "escalate", "from": levels[gamma_idx - 1], "to": gamma})
        targets = [corrs[i] for i in low]
        low_set = set(low)
        keep_ids: set[int] = set()
        for i, c in enumerate(corrs):
            if i in low_set:
                continue
            if isinstance(c.pos_id, int):
                keep_ids.add(c.pos_id)
            if isinstance(c.ori_id, tuple) and len(c.ori_id) == 2:
                keep_ids.update(c.ori_id)
        try:
            new_ids = hooks.resample(gamma, keep_ids)
            if new_ids is not None:
                ids = set(new_ids)
            emit({
                "t": t, "gamma": gamma, "action": "resample",
                "keypoints": sorted(ids) if ids is not None else None,
            })
            refreshed = hooks.align(targets, gamma)
        except PasgError as exc:
            cause = f"provider_error: {type(exc).__name__}: {exc}"
            emit({"t": t, "gamma": gamma, "action": "fail", "guard": "provider_error",
                  "cause": cause})
            return RefineOutcome("failed", corrs, trace, t, gamma, failure_cause=cause)
        emit({
            "t": t, "gamma": gamma, "action": "align",
            "targets": [f"{c.record_class.value}:{c.stage}" for c in targets],
        })
        corrs = replace_low_conf(corrs, refreshed, low)
        emit({"t": t, "gamma": gamma, "action": "replace",
              "still_low": len(find_low_confidence(corrs, cfg.low_conf_threshold, ids))})
    emit({"t": t, "gamma": levels[gamma_idx], "action": "fail", "guard": "while_guard"})
    return RefineOutcome("failed", corrs, trace, t, levels[gamma_idx], failure_cause="while_guard")
