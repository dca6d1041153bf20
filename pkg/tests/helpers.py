"""Shared fixture builders for the pipeline test suite."""
from pathlib import Path

import numpy as np

from pasg.masks import BinaryMask

FIXTURES = Path(__file__).parent.parent / "fixtures"
GOLDEN = FIXTURES / "golden"


def random_mask(rng: np.random.Generator, size: int = 32, n_blobs: int | None = None) -> np.ndarray:
    """Union of random rectangles and disks; may be empty."""
    grid = np.zeros((size, size), dtype=bool)
    n = n_blobs if n_blobs is not None else int(rng.integers(1, 5))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n):
        if size < 8 or rng.random() < 0.5:
            r0, c0 = rng.integers(0, size - 2, 2)
            r1 = int(rng.integers(r0 + 1, min(r0 + max(size // 2, 2), size)))
            c1 = int(rng.integers(c0 + 1, min(c0 + max(size // 2, 2), size)))
            grid[r0:r1, c0:c1] = True
        else:
            cy, cx = rng.integers(3, size - 3, 2)
            rad = int(rng.integers(2, max(size // 4, 3)))
            grid |= (xx - cx) ** 2 + (yy - cy) ** 2 <= rad**2
    return grid


def random_nonempty_mask(rng: np.random.Generator, size: int = 32) -> BinaryMask:
    while True:
        grid = random_mask(rng, size)
        if grid.any():
            return BinaryMask(grid)


def random_blob(rng: np.random.Generator, size: int = 48) -> BinaryMask:
    """Single anisotropic blob with its principal axis tilted away from
    the coordinate axes, so eigenvector signs are numerically stable."""
    angle = float(rng.uniform(np.radians(10), np.radians(80)))
    cx, cy = size / 2, size / 2
    major = float(rng.uniform(size / 5, size / 3))
    minor = float(rng.uniform(size / 10, major * 0.75))
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    return BinaryMask((u / major) ** 2 + (v / minor) ** 2 <= 1.0)
