"""Pipeline configuration: TOML or JSON, unknown keys rejected."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .filtering import FilterParams
from .refine import RefineConfig


@dataclass
class ExtractionConfig:
    min_area_frac: float = 0.01
    simplify_eps: float | None = None  # None = 2% of contour perimeter
    polygon_angle_thresh: float = 60.0
    curvature_window: int = 5
    curvature_angle_thresh: float = 40.0


@dataclass
class LiftingConfig:
    merge_radius_frac: float = 0.02  # of the lifted cloud's bbox diagonal
    deviation_thresh_deg: float = 10.0


@dataclass
class ProviderConfig:
    aligner: str = "mock"  # mock | http
    seg: str = "procedural"  # procedural | file | remote
    vlm_endpoint: str = ""
    vlm_model: str = ""
    seg_endpoint: str = ""  # falls back to PASG_SEG_ENDPOINT
    seg_mask_root: str = ""
    max_in_flight: int = 4

    def resolved_seg_endpoint(self) -> str:
        return self.seg_endpoint or os.environ.get("PASG_SEG_ENDPOINT", "")


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0 = one per object up to the core count


@dataclass
class PipelineConfig:
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    filter: FilterParams = field(default_factory=FilterParams)
    lifting: LiftingConfig = field(default_factory=LiftingConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    providers: ProviderConfig = field(default_factory=ProviderConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def snapshot(self) -> dict:
        def plain(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
            return out

        return {f.name: plain(getattr(self, f.name)) for f in fields(self)}


_SECTION_TYPES = {
    "extraction": ExtractionConfig,
    "filter": FilterParams,
    "lifting": LiftingConfig,
    "refine": RefineConfig,
    "providers": ProviderConfig,
    "run": RunConfig,
}


def _build_section(cls, doc: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys in [{section}]: {sorted(unknown)}")
    kwargs = dict(doc)
    if cls is RefineConfig and "granularity_levels" in kwargs:
        kwargs["granularity_levels"] = tuple(kwargs["granularity_levels"])
    return cls(**kwargs)


def config_from_dict(doc: dict) -> PipelineConfig:
    unknown = set(doc) - set(_SECTION_TYPES)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sub = doc.get(name, {})
        if not isinstance(sub, dict):
            raise ValueError(f"config section [{name}] must be a table")
        sections[name] = _build_section(cls, sub, name)
    return PipelineConfig(**sections)


def load_config(path: Path | None) -> PipelineConfig:
    """Defaults when no path; otherwise .toml or .json with strict keys."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        doc = json.loads(text.decode("utf-8"))
    else:
        doc = tomli.loads(text.decode("utf-8"))
    return config_from_dict(doc)
