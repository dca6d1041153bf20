"""On-disk view-set layout: per-view mask, depth, RGB, and camera metadata.

Layout per object::

    <object_id>/view_<k>/{mask.png, depth.pgm, rgb.png, meta.json}   k = 0..7

plus optional ``view_top/`` and ``view_bottom/`` directories with the same
file schema, consumed by principal-frame calibration when present.

Masks are single-channel 8-bit PNG, 0 = background; any value >= 128 reads
as foreground. Depth is 16-bit binary PGM: raw 0 marks a miss, raw 1..65535
maps linearly onto [depth_min, depth_max] from meta.json.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptFile, DimensionMismatch, MissingView
from .lifting import OrthoCamera, camera_for_view
from .masks import BinaryMask, DepthMap

POSE_KINDS = ("horizontal", "oblique", "top", "bottom")

# view_id -> (pose_kind, azimuth, elevation) for the canonical 8-view ring.
CANONICAL_VIEWS = {
    0: ("horizontal", 0.0, 0.0),
    1: ("horizontal", 90.0, 0.0),
    2: ("horizontal", 180.0, 0.0),
    3: ("horizontal", 270.0, 0.0),
    4: ("oblique", 0.0, 45.0),
    5: ("oblique", 90.0, 45.0),
    6: ("oblique", 180.0, 45.0),
    7: ("oblique", 270.0, 45.0),
}


@dataclass
class ViewMeta:
    view_id: int
    pose_kind: str
    azimuth_deg: float
    elevation_deg: float
    scale: float
    standoff: float

    def __post_init__(self):
        if self.pose_kind not in POSE_KINDS:
            raise CorruptFile(f"unknown pose_kind {self.pose_kind!r}")


@dataclass
class View:
    meta: ViewMeta
    mask: BinaryMask
    depth: DepthMap
    camera: OrthoCamera
    rgb: np.ndarray | None = None  # (H, W, 3) uint8


@dataclass
class ViewSet:
    object_id: str
    views: list[View]
    top: View | None = None
    bottom: View | None = None

    @property
    def image_size(self) -> tuple[int, int]:
        m = self.views[0].mask
        return (m.height, m.width)


def write_pgm16(path: Path, depth: DepthMap, depth_min: float, depth_max: float):
    """16-bit binary PGM; raw 0 = miss, 1..65535 spans [depth_min, depth_max]."""
    span = depth_max - depth_min
    raw = np.zeros(depth.values.shape, dtype=np.uint16)
    if span > 0:
        scaled = np.rint((depth.values - depth_min) / span * 65534.0) + 1.0
    else:
        scaled = np.ones_like(depth.values)
    raw[depth.valid] = np.clip(scaled[depth.valid], 1, 65535).astype(np.uint16)
    h, w = raw.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(raw.astype(">u2").tobytes())


def read_pgm16(path: Path, depth_min: float, depth_max: float) -> DepthMap:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise CorruptFile(f"{path}: not a binary PGM")
    w, h, maxval = (int(m.group(k)) for k in (1, 2, 3))
    if maxval != 65535:
        raise CorruptFile(f"{path}: expected 16-bit PGM, maxval={maxval}")
    body = data[m.end():]
    if len(body) < 2 * w * h:
        raise CorruptFile(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=">u2", count=w * h)
    raw = pixels.reshape(h, w).astype(np.float64)
    valid = raw > 0
    values = np.zeros_like(raw)
    values[valid] = depth_min + (raw[valid] - 1.0) / 65534.0 * (depth_max - depth_min)
    return DepthMap(values=values, valid=valid)


def write_mask_png(path: Path, mask: BinaryMask):
    img = Image.fromarray(np.where(mask.data, 255, 0).astype(np.uint8), mode="L")
    img.save(path)


def read_mask_png(path: Path) -> BinaryMask:
    try:
        img = Image.open(path).convert("L")
    except Exception as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return BinaryMask(np.asarray(img) >= 128)


def write_rgb_png(path: Path, rgb: np.ndarray):
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(path)


def read_rgb_png(path: Path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return np.asarray(img)


def save_view(view_dir: Path, meta: ViewMeta, mask: BinaryMask, depth: DepthMap,
              rgb: np.ndarray | None = None):
    view_dir.mkdir(parents=True, exist_ok=True)
    if depth.valid.any():
        dmin = float(depth.values[depth.valid].min())
        dmax = float(depth.values[depth.valid].max())
    else:
        dmin = dmax = 0.0
    write_mask_png(view_dir / "mask.png", mask)
    write_pgm16(view_dir / "depth.pgm", depth, dmin, dmax)
    if rgb is not None:
        write_rgb_png(view_dir / "rgb.png", rgb)
    meta_doc = {
        "view_id": meta.view_id,
        "pose_kind": meta.pose_kind,
        "azimuth_deg": meta.azimuth_deg,
        "elevation_deg": meta.elevation_deg,
        "scale": meta.scale,
        "standoff": meta.standoff,
        "depth_min": dmin,
        "depth_max": dmax,
    }
    (view_dir / "meta.json").write_text(json.dumps(meta_doc, indent=2) + "\n")


def _load_view(view_dir: Path) -> View:
    meta_path = view_dir / "meta.json"
    try:
        doc = json.loads(meta_path.read_text())
        meta = ViewMeta(
            view_id=int(doc["view_id"]),
            pose_kind=doc["pose_kind"],
            azimuth_deg=float(doc["azimuth_deg"]),
            elevation_deg=float(doc["elevation_deg"]),
            scale=float(doc["scale"]),
            standoff=float(doc.get("standoff", 0.0)),
        )
        depth_min = float(doc["depth_min"])
        depth_max = float(doc["depth_max"])
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{meta_path}: {exc}") from exc
    mask = read_mask_png(view_dir / "mask.png")
    depth = read_pgm16(view_dir / "depth.pgm", depth_min, depth_max)
    rgb = None
    if (view_dir / "rgb.png").exists():
        rgb = read_rgb_png(view_dir / "rgb.png")
    camera = camera_for_view(
        meta.azimuth_deg, meta.elevation_deg, meta.scale, meta.standoff,
        (mask.height, mask.width),
    )
    return View(meta=meta, mask=mask, depth=depth, camera=camera, rgb=rgb)


def load_view_set(object_dir: Path) -> ViewSet:
    """Read one object's views, validating coverage and dimensions."""
    object_dir = Path(object_dir)
    views = []
    for k in range(8):
        vdir = object_dir / f"view_{k}"
        if not vdir.is_dir():
            raise MissingView(f"{object_dir.name}: view_{k} missing")
        views.append(_load_view(vdir))

    seen = {(v.meta.pose_kind, v.meta.azimuth_deg) for v in views}
    expected = {(kind, az) for kind, az, _ in CANONICAL_VIEWS.values()}
    if seen != expected:
        raise CorruptFile(
            f"{object_dir.name}: views do not cover the 8 canonical poses exactly once"
        )

    size = (views[0].mask.height, views[0].mask.width)
    extras = {}
    for name in ("top", "bottom"):
        vdir = object_dir / f"view_{name}"
        extras[name] = _load_view(vdir) if vdir.is_dir() else None

    for v in views + [x for x in extras.values() if x is not None]:
        for h, w, what in (
            (v.mask.height, v.mask.width, "mask"),
            (v.depth.height, v.depth.width, "depth"),
        ):
            if (h, w) != size:
                raise DimensionMismatch(
                    f"{object_dir.name} view {v.meta.view_id}: {what} is {w}x{h}, "
                    f"expected {size[1]}x{size[0]}"
                )
        if v.rgb is not None and v.rgb.shape[:2] != size:
            raise DimensionMismatch(
                f"{object_dir.name} view {v.meta.view_id}: rgb size mismatch"
            )

    return ViewSet(
        object_id=object_dir.name,
        views=views,
        top=extras["top"],
        bottom=extras["bottom"],
    )
