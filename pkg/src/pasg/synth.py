"""Procedural orthographic renders for fixtures and the offline demo.

Sphere-traced signed distance fields give matched mask/depth/RGB triples
for every canonical view, so lifting and calibration can be exercised
without any mesh tooling. Everything here is deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lifting import OrthoCamera, camera_for_view
from .masks import BinaryMask, DepthMap
from .viewio import CANONICAL_VIEWS, ViewMeta, save_view

HIT_EPS = 1e-4
MAX_STEPS = 256


def rotation_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rotation_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def transformed(sdf, offset=(0.0, 0.0, 0.0), rotation: np.ndarray | None = None):
    off = np.asarray(offset, dtype=np.float64)
    rot = None if rotation is None else np.asarray(rotation, dtype=np.float64)

    def wrapped(p):
        q = p - off
        if rot is not None:
            q = q @ rot  # row vectors: q @ R == R^T q
        return sdf(q)

    return wrapped


def sd_box(half_extents):
    b = np.asarray(half_extents, dtype=np.float64)

    def sdf(p):
        q = np.abs(p) - b
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    return sdf


def sd_cylinder(radius: float, half_height: float):
    def sdf(p):
        radial = np.hypot(p[..., 0], p[..., 1]) - radius
        axial = np.abs(p[..., 2]) - half_height
        outside = np.hypot(np.maximum(radial, 0.0), np.maximum(axial, 0.0))
        inside = np.minimum(np.maximum(radial, axial), 0.0)
        return outside + inside

    return sdf


def sd_capped_cone(half_height: float, r_base: float, r_tip: float):
    h, r1, r2 = half_height, r_base, r_tip

    def sdf(p):
        qx = np.hypot(p[..., 0], p[..., 1])
        qy = p[..., 2]
        k1 = np.array([r2, h])
        k2 = np.array([r2 - r1, 2.0 * h])
        cax = qx - np.minimum(qx, np.where(qy < 0.0, r1, r2))
        cay = np.abs(qy) - h
        t = np.clip(((k1[0] - qx) * k2[0] + (k1[1] - qy) * k2[1]) / (k2 @ k2), 0.0, 1.0)
        cbx = qx - k1[0] + k2[0] * t
        cby = qy - k1[1] + k2[1] * t
        s = np.where((cbx < 0.0) & (cay < 0.0), -1.0, 1.0)
        return s * np.sqrt(np.minimum(cax**2 + cay**2, cbx**2 + cby**2))

    return sdf


def sd_capped_torus(major: float, minor: float, half_angle_deg: float):
    """Torus arc in the local XY plane, opening +/- half_angle around +Y."""
    an = math.radians(half_angle_deg)
    sc = np.array([math.sin(an), math.cos(an)])

    def sdf(p):
        px = np.abs(p[..., 0])
        py = p[..., 1]
        pz = p[..., 2]
        on_arc = sc[1] * px > sc[0] * py
        k = np.where(on_arc, px * sc[0] + py * sc[1], np.hypot(px, py))
        pp = px**2 + py**2 + pz**2
        return np.sqrt(pp + major**2 - 2.0 * major * k) - minor

    return sdf


def union(*sdfs):
    def sdf(p):
        d = sdfs[0](p)
        for f in sdfs[1:]:
            d = np.minimum(d, f(p))
        return d

    return sdf


@dataclass
class RenderResult:
    mask: BinaryMask
    depth: DepthMap
    rgb: np.ndarray
    points: np.ndarray  # (H, W, 3) world-space hit points, NaN on miss


def render_view(sdf, cam: OrthoCamera, size: tuple[int, int], t_max: float = 4.0) -> RenderResult:
    h, w = size
    cx, cy = cam.principal_pixel
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    base = (
        cam.origin[None, None, :]
        + (px - cx)[..., None] * cam.scale * cam.right[None, None, :]
        + (cy - py)[..., None] * cam.scale * cam.up[None, None, :]
    ).reshape(-1, 3)

    t = np.zeros(base.shape[0])
    hit = np.zeros(base.shape[0], dtype=bool)
    active = np.ones(base.shape[0], dtype=bool)
    for _ in range(MAX_STEPS):
        if not active.any():
            break
        pts = base[active] + t[active, None] * cam.forward[None, :]
        d = sdf(pts)
        newly_hit = d < HIT_EPS
        idx = np.nonzero(active)[0]
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(d, 0.0)
        still = ~newly_hit & (t[idx] <= t_max)
        active[idx] = still

    points = np.full((base.shape[0], 3), np.nan)
    points[hit] = base[hit] + t[hit, None] * cam.forward[None, :]

    # Lambert shading from the SDF gradient keeps overlays readable.
    rgb = np.zeros((base.shape[0], 3), dtype=np.uint8)
    if hit.any():
        p = points[hit]
        e = 1e-4
        grad = np.stack(
            [
                sdf(p + [e, 0, 0]) - sdf(p - [e, 0, 0]),
                sdf(p + [0, e, 0]) - sdf(p - [0, e, 0]),
                sdf(p + [0, 0, e]) - sdf(p - [0, 0, e]),
            ],
            axis=1,
        )
        norms = np.linalg.norm(grad, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        normal = grad / norms
        light = np.array([0.4, 0.3, 0.85])
        light = light / np.linalg.norm(light)
        lambert = np.clip(normal @ light, 0.0, 1.0)
        # Keep every object pixel >= 128 so mask-threshold segmentation of
        # the RGB recovers the silhouette exactly.
        shade = (128 + 112 * lambert).astype(np.uint8)
        rgb[hit] = shade[:, None]

    mask = BinaryMask(hit.reshape(h, w))
    depth = DepthMap(values=np.where(hit, t, 0.0).reshape(h, w), valid=hit.reshape(h, w))
    return RenderResult(
        mask=mask,
        depth=depth,
        rgb=rgb.reshape(h, w, 3),
        points=points.reshape(h, w, 3),
    )


# --- fixture objects -------------------------------------------------------

def block_scene():
    return sd_box((0.28, 0.2, 0.14))


def bottle_scene():
    body = sd_cylinder(0.16, 0.26)
    neck = transformed(sd_cylinder(0.055, 0.09), offset=(0.0, 0.0, 0.33))
    return union(body, neck)


def teapot_scene():
    body = sd_cylinder(0.19, 0.16)
    handle = transformed(
        sd_capped_torus(0.13, 0.035, 110.0),
        offset=(-0.24, 0.0, 0.0),
        # Local torus XY plane mapped onto the world XZ plane, arc opening
        # away from the body.
        rotation=np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
    )
    spout = transformed(
        sd_capped_cone(0.13, 0.05, 0.018),
        offset=(0.27, 0.0, 0.08),
        rotation=rotation_y(60.0),
    )
    return union(body, handle, spout)


def tilted_cylinder_scene(tilt_deg: float = 30.0):
    rot = rotation_x(tilt_deg)
    return transformed(sd_cylinder(0.12, 0.3), rotation=rot), rot


FIXTURE_SCENES = {
    "block": block_scene,
    "bottle": bottle_scene,
    "teapot": teapot_scene,
}

DEFAULT_SIZE = 160
DEFAULT_SCALE = 1.0 / DEFAULT_SIZE  # one world unit across the image
DEFAULT_STANDOFF = 1.2


def view_poses(include_calibration: bool = True):
    poses = [
        (f"view_{k}", ViewMeta(k, kind, az, el, DEFAULT_SCALE, DEFAULT_STANDOFF))
        for k, (kind, az, el) in CANONICAL_VIEWS.items()
    ]
    if include_calibration:
        poses.append(("view_top", ViewMeta(8, "top", 0.0, 90.0, DEFAULT_SCALE, DEFAULT_STANDOFF)))
        poses.append(("view_bottom", ViewMeta(9, "bottom", 0.0, -90.0, DEFAULT_SCALE, DEFAULT_STANDOFF)))
    return poses


def render_object(
    sdf,
    object_id: str,
    out_dir: Path,
    size: int = DEFAULT_SIZE,
    include_calibration: bool = True,
):
    """Render and persist every view of one object; returns its directory."""
    obj_dir = Path(out_dir) / object_id
    for dirname, meta in view_poses(include_calibration):
        scale = DEFAULT_SCALE * (DEFAULT_SIZE / size)
        meta = ViewMeta(meta.view_id, meta.pose_kind, meta.azimuth_deg,
                        meta.elevation_deg, scale, meta.standoff)
        cam = camera_for_view(meta.azimuth_deg, meta.elevation_deg, meta.scale,
                              meta.standoff, (size, size))
        result = render_view(sdf, cam, (size, size))
        save_view(obj_dir / dirname, meta, result.mask, result.depth, result.rgb)
    return obj_dir


def make_demo_objects(out_dir: Path, size: int = DEFAULT_SIZE) -> list[Path]:
    """The three-object offline demo set."""
    return [
        render_object(factory(), name, out_dir, size=size)
        for name, factory in FIXTURE_SCENES.items()
    ]


def two_circles_image(size: int = 128) -> np.ndarray:
    """Two circles bridged by a one-pixel diagonal, as a grayscale image.

    The circles sit wholly inside the top-left and bottom-right image
    quadrants and the bridge runs exactly on the diagonal, so coarse
    segmentation sees one merged region and the quadrant split sees two.
    """
    img = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    r = max(size // 6, 4)
    a = size * 5 // 16
    b = size - 1 - a
    img[(xx - a) ** 2 + (yy - a) ** 2 <= r**2] = 255
    img[(xx - b) ** 2 + (yy - b) ** 2 <= r**2] = 255
    for k in range(a, b + 1):
        img[k, k] = 255
    return img
