"""Binary mask cleanup: connected components and largest-region extraction.

Pixel convention used throughout the package: the pixel at row ``i``,
column ``j`` is the point ``(x=j, y=i)``. Integer coordinates land on
pixel centers, so hand-computed oracles stay exact.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyMask

# Offsets of the 8-connected neighborhood (diagonal pixels connect).
_NEIGHBORS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class BinaryMask:
    """Row-major boolean grid, True = foreground."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not bool(self.data.any())

    def bbox_diagonal(self) -> float:
        """Diagonal length of the foreground bounding box, in pixels."""
        rows, cols = np.nonzero(self.data)
        if rows.size == 0:
            raise EmptyMask("bbox of an all-background mask")
        dh = float(rows.max() - rows.min() + 1)
        dw = float(cols.max() - cols.min() + 1)
        return float(np.hypot(dh, dw))


@dataclass
class DepthMap:
    """Per-pixel depth along the camera forward axis; ``valid`` marks hits."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise DimensionMismatch(
                f"depth values {self.values.shape} vs validity {self.valid.shape}"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Region:
    """One labeled 8-connected component.

    ``bbox`` is (min_row, min_col, max_row_exclusive, max_col_exclusive);
    ``anchor`` is the component's topmost-then-leftmost pixel, used for
    deterministic tie-breaking.
    """

    label: int
    area: int
    bbox: tuple[int, int, int, int]
    anchor: tuple[int, int]


def label_components(mask: BinaryMask) -> np.ndarray:
    """Label 8-connected foreground components.

    Returns an int array, 0 = background, labels 1..N assigned in
    raster-scan discovery order.
    """
    grid = mask.data
    h, w = grid.shape
    labels = np.zeros((h, w), dtype=np.int32)
    next_label = 0
    for r0 in range(h):
        for c0 in range(w):
            if not grid[r0, c0] or labels[r0, c0]:
                continue
            next_label += 1
            queue = deque([(r0, c0)])
            labels[r0, c0] = next_label
            while queue:
                r, c = queue.popleft()
                for dr, dc in _NEIGHBORS_8:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and grid[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = next_label
                        queue.append((rr, cc))
    return labels


def connected_components(mask: BinaryMask) -> list[Region]:
    """Regions of the mask, sorted by area descending.

    Ties break on the smallest (row, col) of each region's topmost-leftmost
    pixel, so the ordering is deterministic.
    """
    if mask.is_empty():
        raise EmptyMask("connected_components on all-background mask")
    labels = label_components(mask)
    regions = []
    for label in range(1, int(labels.max()) + 1):
        rows, cols = np.nonzero(labels == label)
        bbox = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
        # Labels are assigned in raster order, so index 0 is the anchor pixel.
        anchor = (int(rows[0]), int(cols[0]))
        regions.append(Region(label=label, area=int(rows.size), bbox=bbox, anchor=anchor))
    regions.sort(key=lambda r: (-r.area, r.anchor))
    return regions


def extract_foreground(mask: BinaryMask, min_area_frac: float = 0.01) -> BinaryMask:
    """Keep the single largest component; small components are noise.

    Components below ``min_area_frac`` of the largest area are dropped
    first; if several survive, only the largest is kept so the output
    always satisfies the single-component invariant.
    """
    regions = connected_components(mask)
    labels = label_components(mask)
    largest = regions[0]
    cutoff = min_area_frac * largest.area
    survivors = [r for r in regions if r.area >= cutoff]
    keep = survivors[0]
    return BinaryMask(labels == keep.label)
