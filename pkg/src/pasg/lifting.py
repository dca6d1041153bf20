"""2D-to-3D lifting, cross-view merging, and principal-frame calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateAxis, EmptyMask, NoDepth
from .keypoints import Keypoint2D, KeypointSource, SOURCE_ORDER, centroid
from .masks import BinaryMask, DepthMap

# Axis colors are part of the annotation contract and never configurable.
AXIS_COLORS = {"x": (255, 0, 0), "y": (0, 255, 0), "z": (0, 0, 255)}

_ORTHO_TOL = 1e-9


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("zero-length axis")
    return v / n


@dataclass
class OrthoCamera:
    """Orthographic camera: right x up = forward, scale in world units/px."""

    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    origin: np.ndarray
    scale: float
    principal_pixel: tuple[float, float]

    def __post_init__(self):
        self.right = np.asarray(self.right, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        self.forward = np.asarray(self.forward, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        for name, v in (("right", self.right), ("up", self.up), ("forward", self.forward)):
            if abs(np.linalg.norm(v) - 1.0) > _ORTHO_TOL:
                raise ValueError(f"camera {name} axis is not unit length")
        pairs = ((self.right, self.up), (self.right, self.forward), (self.up, self.forward))
        if any(abs(float(a @ b)) > _ORTHO_TOL for a, b in pairs):
            raise ValueError("camera axes are not orthogonal")
        if np.linalg.norm(np.cross(self.right, self.up) - self.forward) > 1e-8:
            raise ValueError("camera is not right-handed (right x up != forward)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def camera_for_view(
    azimuth_deg: float,
    elevation_deg: float,
    scale: float,
    standoff: float,
    image_size: tuple[int, int],
) -> OrthoCamera:
    """Canonical object-facing camera for the rendering convention.

    The camera sits ``standoff`` world units from the origin along the
    (azimuth, elevation) direction and looks back at the origin. Up is the
    world +Z projected off the view axis; straight top/bottom views fall
    back to world +Y.
    """
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    direction = np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    forward = -_unit(direction)
    world_up = np.array([0.0, 0.0, 1.0])
    lateral = world_up - (world_up @ forward) * forward
    if np.linalg.norm(lateral) < 1e-9:
        lateral = np.array([0.0, 1.0, 0.0]) - (np.array([0.0, 1.0, 0.0]) @ forward) * forward
    up = _unit(lateral)
    right = np.cross(up, forward)
    h, w = image_size
    return OrthoCamera(
        right=right,
        up=up,
        forward=forward,
        origin=standoff * direction,
        scale=scale,
        principal_pixel=((w - 1) / 2.0, (h - 1) / 2.0),
    )


def sample_depth(depth: DepthMap, x: float, y: float) -> float:
    """Bilinear depth at a sub-pixel position.

    Every neighbor that carries weight must be a valid hit; zero-weight
    neighbors (exact integer coordinates) cannot poke holes.
    """
    h, w = depth.values.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise NoDepth(f"({x:.2f}, {y:.2f}) outside depth map")
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    fx = x - x0
    fy = y - y0
    total = 0.0
    for (xx, yy, wgt) in (
        (x0, y0, (1 - fx) * (1 - fy)),
        (min(x0 + 1, w - 1), y0, fx * (1 - fy)),
        (x0, min(y0 + 1, h - 1), (1 - fx) * fy),
        (min(x0 + 1, w - 1), min(y0 + 1, h - 1), fx * fy),
    ):
        if wgt == 0.0:
            continue
        if not depth.valid[yy, xx]:
            raise NoDepth(f"depth hole under ({x:.2f}, {y:.2f})")
        total += wgt * float(depth.values[yy, xx])
    return total


def lift_keypoint(p: Keypoint2D, depth: DepthMap, cam: OrthoCamera) -> np.ndarray:
    """Back-project one keypoint through the orthographic camera."""
    d = sample_depth(depth, p.x, p.y)
    cx, cy = cam.principal_pixel
    return (
        cam.origin
        + (p.x - cx) * cam.scale * cam.right
        + (cy - p.y) * cam.scale * cam.up
        + d * cam.forward
    )


def project_to_view(world: np.ndarray, cam: OrthoCamera) -> tuple[float, float]:
    """Exact inverse of the lateral terms of ``lift_keypoint``."""
    rel = np.asarray(world, dtype=np.float64) - cam.origin
    cx, cy = cam.principal_pixel
    px = cx + float(rel @ cam.right) / cam.scale
    py = cy - float(rel @ cam.up) / cam.scale
    return (px, py)


@dataclass
class Keypoint3D:
    """Merged 3D keypoint with a persistent 1-based index."""

    pos: np.ndarray
    index: int
    support: list[tuple[int, Keypoint2D]]
    source: KeypointSource

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        if self.index < 1:
            raise ValueError("keypoint index must be >= 1")
        if not self.support:
            raise ValueError("keypoint needs at least one supporting observation")


def _dominant_source(members: list[tuple[int, Keypoint2D]]) -> KeypointSource:
    counts: dict[KeypointSource, int] = {}
    for _, kp in members:
        counts[kp.source] = counts.get(kp.source, 0) + 1
    best = max(counts.values())
    for src in SOURCE_ORDER:  # priority breaks count ties
        if counts.get(src, 0) == best:
            return src
    return members[0][1].source


def merge_cross_view(
    lifted: list[tuple[int, Keypoint2D, np.ndarray]],
    merge_radius: float,
    pinned: list[Keypoint3D] | None = None,
    start_index: int | None = None,
) -> list[Keypoint3D]:
    """Single-linkage merge of lifted points into persistent 3D keypoints.

    Points within ``merge_radius`` (chained) collapse to one keypoint at
    the support centroid. Indices follow each cluster's first member in
    input order, starting at 1.

    With ``pinned`` keypoints, lifted points within the radius of a pinned
    position attach to it as extra support (position and index frozen);
    the remainder merge normally and take fresh indices above
    ``start_index`` (defaults to the pinned maximum).
    """
    if merge_radius <= 0:
        raise ValueError("merge_radius must be positive")
    result: list[Keypoint3D] = []
    remaining = list(lifted)

    if pinned:
        result = [
            Keypoint3D(k.pos.copy(), k.index, list(k.support), k.source) for k in pinned
        ]
        spare = []
        for entry in remaining:
            view_id, kp, w = entry
            w = np.asarray(w, dtype=np.float64)
            host = None
            for existing in result:
                if float(np.linalg.norm(existing.pos - w)) <= merge_radius:
                    host = existing
                    break
            if host is not None:
                host.support.append((view_id, kp))
            else:
                spare.append(entry)
        remaining = spare

    n = len(remaining)
    if n:
        positions = np.array([np.asarray(w, dtype=np.float64) for _, _, w in remaining])
        dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
        adjacency = dist <= merge_radius
        cluster_of = [-1] * n
        clusters: list[list[int]] = []
        for i in range(n):
            if cluster_of[i] != -1:
                continue
            members = [i]
            cluster_of[i] = len(clusters)
            stack = [i]
            while stack:
                a = stack.pop()
                for b in np.nonzero(adjacency[a])[0]:
                    b = int(b)
                    if cluster_of[b] == -1:
                        cluster_of[b] = len(clusters)
                        members.append(b)
                        stack.append(b)
            clusters.append(sorted(members))

        next_index = start_index
        if next_index is None:
            next_index = (max((k.index for k in result), default=0)) + 1
        # Input order already encodes (view order, detection order).
        for members in sorted(clusters, key=lambda m: m[0]):
            pos = positions[members].mean(axis=0)
            support = [(remaining[m][0], remaining[m][1]) for m in members]
            result.append(
                Keypoint3D(pos, next_index, support, _dominant_source(support))
            )
            next_index += 1
    return result


@dataclass
class PrincipalFrame:
    """Calibrated object frame; axis colors are fixed red/green/blue."""

    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.x_axis = _unit(self.x_axis)
        self.y_axis = _unit(self.y_axis)
        self.z_axis = _unit(self.z_axis)
        pairs = (
            (self.x_axis, self.y_axis),
            (self.x_axis, self.z_axis),
            (self.y_axis, self.z_axis),
        )
        if any(abs(float(a @ b)) > _ORTHO_TOL for a, b in pairs):
            raise ValueError("frame axes are not orthogonal")
        if np.linalg.norm(np.cross(self.x_axis, self.y_axis) - self.z_axis) > 1e-8:
            raise ValueError("frame is not right-handed")

    @property
    def colors(self) -> dict[str, tuple[int, int, int]]:
        return dict(AXIS_COLORS)


def default_frame(origin=(0.0, 0.0, 0.0)) -> PrincipalFrame:
    return PrincipalFrame(
        origin=np.asarray(origin, dtype=np.float64),
        x_axis=np.array([1.0, 0.0, 0.0]),
        y_axis=np.array([0.0, 1.0, 0.0]),
        z_axis=np.array([0.0, 0.0, 1.0]),
    )


@dataclass
class CalibrationResult:
    frame: PrincipalFrame
    status: str  # "default_kept" | "rebuilt" | "degenerate"
    deviation_deg: float


def _lift_mask_centroid(mask: BinaryMask, depth: DepthMap, cam: OrthoCamera) -> np.ndarray:
    cx, cy = centroid(mask)
    kp = Keypoint2D(cx, cy, KeypointSource.CENTROID)
    try:
        return lift_keypoint(kp, depth, cam)
    except NoDepth:
        # Centroid over a hole (ring-like masks): fall back to the mean
        # depth of the foreground so calibration stays total.
        valid = depth.valid & mask.data
        if not valid.any():
            raise
        mean_d = float(depth.values[valid].mean())
        return (
            cam.origin
            + (cx - cam.principal_pixel[0]) * cam.scale * cam.right
            + (cam.principal_pixel[1] - cy) * cam.scale * cam.up
            + mean_d * cam.forward
        )


def calibrate_principal_frame(
    top: tuple[BinaryMask, DepthMap, OrthoCamera],
    bottom: tuple[BinaryMask, DepthMap, OrthoCamera],
    frame: PrincipalFrame,
    deviation_thresh_deg: float = 10.0,
) -> CalibrationResult:
    """Rectify the frame against the top/bottom centroid axis.

    The candidate Z axis runs from the lifted bottom-view centroid to the
    lifted top-view centroid. Below the deviation threshold the provided
    frame is trusted; beyond it the frame is rebuilt around the measured
    axis. Coincident centroids keep the frame and flag degeneracy.
    """
    for mask, _, _ in (top, bottom):
        if mask.is_empty():
            raise EmptyMask("calibration view has no foreground")
    top_pt = _lift_mask_centroid(*top)
    bottom_pt = _lift_mask_centroid(*bottom)
    axis = top_pt - bottom_pt
    norm = float(np.linalg.norm(axis))
    if norm < 1e-6:
        return CalibrationResult(frame=frame, status="degenerate", deviation_deg=0.0)
    z = axis / norm
    cos_dev = float(np.clip(z @ frame.z_axis, -1.0, 1.0))
    deviation = math.degrees(math.acos(cos_dev))
    if deviation < deviation_thresh_deg:
        return CalibrationResult(frame=frame, status="default_kept", deviation_deg=deviation)
    x = frame.x_axis - (frame.x_axis @ z) * z
    if np.linalg.norm(x) < 1e-9:
        # Old X collapsed onto the new Z; borrow the old Y instead.
        x = frame.y_axis - (frame.y_axis @ z) * z
    x = _unit(x)
    y = np.cross(z, x)
    rebuilt = PrincipalFrame(origin=frame.origin, x_axis=x, y_axis=y, z_axis=z)
    return CalibrationResult(frame=rebuilt, status="rebuilt", deviation_deg=deviation)
