"""Two-stage keypoint redundancy filter: density pruning then spread sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .keypoints import Keypoint2D, KeypointSource

NOISE = -1


@dataclass
class FilterParams:
    """Knobs for the redundancy filter.

    ``dbscan_eps`` of None derives 5% of the mask bounding-box diagonal at
    call time.
    """

    dbscan_eps: float | None = None
    dbscan_min_pts: int = 2
    fps_k: int = 12

    def __post_init__(self):
        if self.dbscan_eps is not None and self.dbscan_eps <= 0:
            raise ValueError("dbscan_eps must be positive")
        if self.dbscan_min_pts < 1:
            raise ValueError("dbscan_min_pts must be >= 1")
        if self.fps_k < 1:
            raise ValueError("fps_k must be >= 1")


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering with deterministic label assignment.

    A point is core when it has >= min_pts neighbors within eps (distance
    inclusive, itself counted). Clusters are grown in index order with a
    FIFO seed queue, so a border point reachable from several clusters
    joins the one whose expansion touches it first. Noise is -1.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    labels = np.full(n, -2, dtype=np.int64)  # -2 = unvisited
    if n == 0:
        return labels
    dist = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    neighbor_lists = [np.nonzero(dist[i] <= eps)[0] for i in range(n)]
    is_core = np.array([len(nb) >= min_pts for nb in neighbor_lists])

    cluster = -1
    for i in range(n):
        if labels[i] != -2:
            continue
        if not is_core[i]:
            labels[i] = NOISE
            continue
        cluster += 1
        labels[i] = cluster
        queue = list(neighbor_lists[i])
        qi = 0
        while qi < len(queue):
            j = int(queue[qi])
            qi += 1
            if labels[j] == NOISE:
                labels[j] = cluster  # noise reclassified as border
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if is_core[j]:
                queue.extend(neighbor_lists[j])
    return labels


def cluster_representatives(points: np.ndarray, labels: np.ndarray) -> list[int]:
    """Indices of surviving points: one medoid per cluster plus all noise.

    The medoid minimizes the summed distance to its cluster; ties go to the
    lowest index. Output indices come back in original order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels)
    keep: set[int] = set(int(i) for i in np.nonzero(labels == NOISE)[0])
    for lab in sorted(set(int(v) for v in labels) - {NOISE}):
        members = np.nonzero(labels == lab)[0]
        sub = pts[members]
        sums = np.hypot(*(sub[:, None, :] - sub[None, :, :]).transpose(2, 0, 1)).sum(axis=1)
        keep.add(int(members[int(np.argmin(sums))]))  # argmin takes first on ties
    return sorted(keep)


def farthest_point_sampling(points: np.ndarray, k: int) -> list[int]:
    """Greedy max-min subset selection, indices in pick order.

    Seeds at the point farthest from the set centroid; each later pick
    maximizes the minimum distance to everything already picked. Ties go
    to the lowest index. Uses an incremental min-distance cache, O(nk).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return []
    k = min(k, n)
    center = pts.mean(axis=0)
    d0 = np.hypot(*(pts - center).T)
    picks = [int(np.argmax(d0))]  # argmax takes first on ties
    min_dist = np.hypot(*(pts - pts[picks[0]]).T)
    while len(picks) < k:
        nxt = int(np.argmax(min_dist))
        picks.append(nxt)
        min_dist = np.minimum(min_dist, np.hypot(*(pts - pts[nxt]).T))
    return picks


def filter_keypoints(
    k_raw: list[Keypoint2D],
    params: FilterParams,
    bbox_diagonal: float | None = None,
) -> list[Keypoint2D]:
    """Reduce a raw keypoint set to its distinctive members.

    Centroid-source points always survive. The rest go through density
    pruning (cluster medoids kept, isolated points pass) and farthest
    point sampling down to ``fps_k``. Source and view tags ride along.
    """
    centroids = [p for p in k_raw if p.source is KeypointSource.CENTROID]
    rest = [p for p in k_raw if p.source is not KeypointSource.CENTROID]
    if not rest:
        return list(centroids)

    coords = np.array([[p.x, p.y] for p in rest], dtype=np.float64)
    eps = params.dbscan_eps
    if eps is None:
        if bbox_diagonal is None:
            span = coords.max(axis=0) - coords.min(axis=0)
            bbox_diagonal = float(np.hypot(*span))
        eps = max(0.05 * bbox_diagonal, 1e-9)

    labels = dbscan(coords, eps, params.dbscan_min_pts)
    survivors = cluster_representatives(coords, labels)
    reduced = coords[survivors]
    picks = farthest_point_sampling(reduced, params.fps_k)
    sampled = [rest[survivors[i]] for i in picks]
    return list(centroids) + sampled
