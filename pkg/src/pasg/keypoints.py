"""Per-view geometric keypoint extraction.

Produces the raw keypoint set for one view: mask centroid, polygon
corners, curvature corners, and principal-axis boundary intersections.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContourTooShort, EmptyMask
from .masks import BinaryMask


class KeypointSource(enum.Enum):
    CENTROID = "centroid"
    POLYGON_CORNER = "polygon_corner"
    CURVATURE_CORNER = "curvature_corner"
    PCA_BOUNDARY = "pca_boundary"


# Dedup priority: earlier sources win when points coincide.
SOURCE_ORDER = (
    KeypointSource.CENTROID,
    KeypointSource.POLYGON_CORNER,
    KeypointSource.CURVATURE_CORNER,
    KeypointSource.PCA_BOUNDARY,
)


@dataclass(frozen=True)
class Keypoint2D:
    x: float
    y: float
    source: KeypointSource
    view_id: int = -1

    @property
    def pos(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class Contour:
    """Closed polyline of boundary pixel centers, (x, y) per row.

    Counter-clockwise by the shoelace sign of the stored (x, y)
    coordinates (y is the row index).
    """

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def perimeter(self) -> float:
        if len(self) < 2:
            return 0.0
        d = np.diff(np.vstack([self.points, self.points[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def signed_area(self) -> float:
        p = self.points
        q = np.roll(p, -1, axis=0)
        return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def centroid(mask: BinaryMask) -> tuple[float, float]:
    """First-moment centroid of the foreground, (x, y)."""
    rows, cols = np.nonzero(mask.data)
    if rows.size == 0:
        raise EmptyMask("centroid of all-background mask")
    return (float(cols.mean()), float(rows.mean()))


# Clockwise-on-screen neighbor order (row down), starting East.
_MOORE = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def trace_contour(mask: BinaryMask) -> Contour:
    """Moore border following around the outer boundary.

    Starts at the topmost-then-leftmost foreground pixel. Thin structures
    are traced along both sides, so pixels may repeat in the loop.
    """
    grid = mask.data
    rows, cols = np.nonzero(grid)
    if rows.size == 0:
        raise EmptyMask("trace_contour on all-background mask")
    h, w = grid.shape
    start = (int(rows[0]), int(cols[0]))  # nonzero is raster-ordered

    def foreground(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and grid[p[0], p[1]]

    def step(p, back):
        """First foreground neighbor scanning clockwise from the backtrack."""
        i0 = _MOORE.index((back[0] - p[0], back[1] - p[1]))
        for k in range(1, 9):
            d = _MOORE[(i0 + k) % 8]
            cand = (p[0] + d[0], p[1] + d[1])
            if foreground(cand):
                prev = _MOORE[(i0 + k - 1) % 8]
                return cand, (p[0] + prev[0], p[1] + prev[1])
        return None, None

    back0 = (start[0], start[1] - 1)  # west of start is background by construction
    first, back = step(start, back0)
    if first is None:
        return Contour(np.array([[start[1], start[0]]], dtype=np.float64))

    points = [start]
    p = first
    limit = 4 * mask.area + 8
    while True:
        if p == start:
            nxt, _ = step(p, back)
            if nxt == first:
                break
        points.append(p)
        p, back = step(p, back)
        if len(points) > limit:
            raise RuntimeError("contour trace failed to close")
    xy = np.array([[c, r] for r, c in points], dtype=np.float64)
    return Contour(xy)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(points - a).T)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(points - proj).T)


def _dp_keep(points: np.ndarray, lo: int, hi: int, eps: float, keep: np.ndarray):
    """Mark Douglas-Peucker survivors on points[lo..hi] (endpoints kept)."""
    if hi - lo < 2:
        return
    inner = points[lo + 1 : hi]
    dists = _segment_distances(inner, points[lo], points[hi])
    imax = int(np.argmax(dists))
    if dists[imax] > eps:
        split = lo + 1 + imax
        keep[split] = True
        _dp_keep(points, lo, split, eps, keep)
        _dp_keep(points, split, hi, eps, keep)


def simplify_polygon(contour: Contour, eps: float | None = None) -> list[tuple[float, float]]:
    """Douglas-Peucker on the closed polyline.

    Seeds the recursion at the two mutually farthest contour points, then
    simplifies both arcs. Vertices come back in original contour order.
    """
    pts = contour.points
    n = pts.shape[0]
    if n < 3:
        return [tuple(p) for p in pts]
    if eps is None:
        eps = 0.02 * contour.perimeter
    if eps <= 0:
        raise ValueError("eps must be positive")

    # Farthest pair, first occurrence wins on ties.
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    if i > j:
        i, j = j, i

    keep = np.zeros(n, dtype=bool)
    keep[i] = keep[j] = True
    # Arc i..j in place, arc j..i through the wrap-around.
    _dp_keep(pts, i, j, eps, keep)
    wrapped = np.vstack([pts[j:], pts[: i + 1]])
    wkeep = np.zeros(wrapped.shape[0], dtype=bool)
    _dp_keep(wrapped, 0, wrapped.shape[0] - 1, eps, wkeep)
    for k in np.nonzero(wkeep)[0]:
        keep[(j + int(k)) % n] = True
    return [tuple(pts[k]) for k in np.nonzero(keep)[0]]


def _turning_angles(pts: np.ndarray, window: int) -> np.ndarray:
    """Turning angle in degrees at each vertex, chords spanning ``window``."""
    v1 = pts - np.roll(pts, window, axis=0)
    v2 = np.roll(pts, -window, axis=0) - pts
    cross = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    dot = (v1 * v2).sum(axis=1)
    angles = np.degrees(np.arctan2(np.abs(cross), dot))
    # Zero-length chords (repeated pixels on thin structures) turn nothing.
    degenerate = (np.hypot(*v1.T) == 0) | (np.hypot(*v2.T) == 0)
    angles[degenerate] = 0.0
    return angles


def _cyclic_distance(i: int, j: int, n: int) -> int:
    d = abs(i - j)
    return min(d, n - d)


def curvature_corners(
    contour: Contour,
    window: int = 5,
    angle_thresh: float = 40.0,
    view_id: int = -1,
) -> list[Keypoint2D]:
    """Corners where the contour turns sharply.

    Candidates above the threshold are non-maximum-suppressed within the
    chord window (highest angle wins, index breaks ties).
    """
    n = len(contour)
    if n <= 2 * window:
        raise ContourTooShort(f"contour has {n} points, need > {2 * window}")
    angles = _turning_angles(contour.points, window)
    candidates = [i for i in range(n) if angles[i] > angle_thresh]
    accepted: list[int] = []
    for i in sorted(candidates, key=lambda k: (-angles[k], k)):
        if all(_cyclic_distance(i, j, n) > window for j in accepted):
            accepted.append(i)
    return [
        Keypoint2D(contour.points[i, 0], contour.points[i, 1], KeypointSource.CURVATURE_CORNER, view_id)
        for i in sorted(accepted)
    ]


@dataclass(frozen=True)
class PcaAxes:
    """Principal axes of the foreground pixel cloud, major first.

    Both eigenvectors are sign-normalized to non-negative x (ties on x = 0
    resolved to non-negative y).
    """

    major: tuple[float, float]
    minor: tuple[float, float]
    eigenvalues: tuple[float, float]
    degenerate: bool


def _fix_sign(v: np.ndarray) -> np.ndarray:
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        return -v
    return v


def pca_axes(mask: BinaryMask) -> PcaAxes:
    """Eigenvectors of the 2x2 covariance of foreground (x, y) coordinates."""
    rows, cols = np.nonzero(mask.data)
    if rows.size == 0:
        raise EmptyMask("pca_axes on all-background mask")
    coords = np.stack([cols, rows], axis=1).astype(np.float64)
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    major = _fix_sign(evecs[:, 1])
    minor = _fix_sign(evecs[:, 0])
    lam1, lam2 = float(evals[1]), float(evals[0])
    degenerate = rows.size < 2 or lam2 <= 1e-12 * max(lam1, 1.0)
    if rows.size == 1:
        major, minor = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    return PcaAxes(
        major=(float(major[0]), float(major[1])),
        minor=(float(minor[0]), float(minor[1])),
        eigenvalues=(lam1, lam2),
        degenerate=degenerate,
    )


def axis_boundary_points(
    mask: BinaryMask,
    axes: PcaAxes,
    center: tuple[float, float],
    view_id: int = -1,
    strip: float = 0.5,
) -> list[Keypoint2D]:
    """Farthest foreground pixel along each principal ray.

    A pixel counts as on-ray when its perpendicular distance is within
    ``strip``. One point per ray in the order +major, -major, +minor,
    -minor; rays that never touch foreground contribute nothing. All
    arithmetic is rotation-invariant, so 90-degree mask rotations map the
    results exactly.
    """
    rows, cols = np.nonzero(mask.data)
    if rows.size == 0:
        raise EmptyMask("axis_boundary_points on all-background mask")
    rx = cols.astype(np.float64) - center[0]
    ry = rows.astype(np.float64) - center[1]
    out: list[Keypoint2D] = []
    for dx, dy in (
        axes.major,
        (-axes.major[0], -axes.major[1]),
        axes.minor,
        (-axes.minor[0], -axes.minor[1]),
    ):
        t = rx * dx + ry * dy
        perp = rx * dy - ry * dx
        eligible = np.nonzero((t >= -1e-9) & (np.abs(perp) <= strip))[0]
        if eligible.size == 0:
            continue
        # Farthest along the ray; exact ties resolved by proximity to the
        # ray, then by the (rotation-equivariant) signed offset.
        best = max(
            eligible.tolist(),
            key=lambda i: (t[i], -abs(perp[i]), perp[i]),
        )
        out.append(
            Keypoint2D(float(cols[best]), float(rows[best]), KeypointSource.PCA_BOUNDARY, view_id)
        )
    return out


def _polygon_turning(vertices: np.ndarray) -> np.ndarray:
    return _turning_angles(vertices, 1)


def extract_raw_keypoints(
    mask: BinaryMask,
    view_id: int = -1,
    simplify_eps: float | None = None,
    polygon_angle_thresh: float = 60.0,
    curvature_window: int = 5,
    curvature_angle_thresh: float = 40.0,
    dedup_radius: float = 1.0,
) -> list[Keypoint2D]:
    """Raw keypoint set for one cleaned, single-component mask.

    Union of the four detectors in fixed source order, deduplicated within
    ``dedup_radius`` px (earliest source wins). Polygon vertices only count
    as corners when the simplified polygon turns more than
    ``polygon_angle_thresh`` there; that keeps smooth outlines (whose
    approximation is a coarse polygon) from spawning fake corners.
    """
    cx, cy = centroid(mask)
    points: list[Keypoint2D] = [Keypoint2D(cx, cy, KeypointSource.CENTROID, view_id)]

    contour = trace_contour(mask)
    verts = simplify_polygon(contour, simplify_eps)
    if len(verts) >= 3:
        varr = np.asarray(verts)
        turning = _polygon_turning(varr)
        for k, (x, y) in enumerate(verts):
            if turning[k] > polygon_angle_thresh:
                points.append(Keypoint2D(float(x), float(y), KeypointSource.POLYGON_CORNER, view_id))

    if len(contour) > 2 * curvature_window:
        points.extend(
            curvature_corners(contour, curvature_window, curvature_angle_thresh, view_id)
        )

    axes = pca_axes(mask)
    points.extend(axis_boundary_points(mask, axes, (cx, cy), view_id))

    kept: list[Keypoint2D] = []
    for cand in points:
        if all(math.hypot(cand.x - k.x, cand.y - k.y) > dedup_radius for k in kept):
            kept.append(cand)
    return kept
