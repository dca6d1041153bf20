"""Deterministic fake segmentation model.

Mirrors the wire contract the pipeline's offline providers implement:
level 1 returns the 8-connected components of the thresholded image
(largest first, raster order breaking ties), level 2 and above splits the
foreground by the fixed image quadrants. No weights, no randomness.
"""
from __future__ import annotations

from collections import deque

import numpy as np

FOREGROUND_THRESHOLD = 128


def to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def _components(fg: np.ndarray) -> list[np.ndarray]:
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    order: list[tuple[int, int]] = []  # (area, first flat index) per label
    current = 0
    for r in range(h):
        for c in range(w):
            if not fg[r, c] or labels[r, c]:
                continue
            current += 1
            queue = deque([(r, c)])
            labels[r, c] = current
            area = 0
            while queue:
                rr, cc = queue.popleft()
                area += 1
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nr, nc = rr + dr, cc + dc
                        if (dr or dc) and 0 <= nr < h and 0 <= nc < w \
                                and fg[nr, nc] and not labels[nr, nc]:
                            labels[nr, nc] = current
                            queue.append((nr, nc))
            order.append((area, r * w + c))
    ranked = sorted(range(1, current + 1), key=lambda lab: (-order[lab - 1][0], order[lab - 1][1]))
    return [labels == lab for lab in ranked]


def _quadrants(fg: np.ndarray) -> list[np.ndarray]:
    h, w = fg.shape
    h2, w2 = h // 2, w // 2
    cells = (
        (slice(0, h2), slice(0, w2)),
        (slice(0, h2), slice(w2, w)),
        (slice(h2, h), slice(0, w2)),
        (slice(h2, h), slice(w2, w)),
    )
    out = []
    for rs, cs in cells:
        cell = np.zeros_like(fg)
        cell[rs, cs] = fg[rs, cs]
        if cell.any():
            out.append(cell)
    return out


def segment(image: np.ndarray, granularity: int) -> list[np.ndarray]:
    """Boolean masks for the requested granularity level."""
    fg = to_gray(image) >= FOREGROUND_THRESHOLD
    if not fg.any():
        return []
    if granularity <= 1:
        return _components(fg)
    return _quadrants(fg)
