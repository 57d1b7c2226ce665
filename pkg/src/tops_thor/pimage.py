"""Persistence images: Gaussian-smoothed, persistence-weighted rasters of a
diagram in birth/persistence coordinates.

Image layout: ``image[r, c]`` covers persistence bin ``r`` and birth bin ``c``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf


@dataclass(frozen=True)
class PiParams:
    resolution: tuple[int, int] = (32, 32)  # (rows, cols) = (persistence, birth)
    birth_range: tuple[float, float] = (0.0, 0.75)
    persistence_range: tuple[float, float] = (0.0, 0.75)
    kernel_spread: float = 2.5e-4
    spread_is_variance: bool = True
    # When set, the grid extent is resolution * pixel_size from the range minima
    # instead of the configured range maxima.
    pixel_size: float | None = None

    def __post_init__(self):
        if min(self.resolution) < 1:
            raise ValueError("resolution must be >= 1")
        if self.birth_range[1] <= self.birth_range[0] or self.persistence_range[1] <= self.persistence_range[0]:
            raise ValueError("ranges need hi > lo")
        if self.kernel_spread <= 0:
            raise ValueError("kernel_spread must be positive")
        if self.pixel_size is not None and self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")

    @property
    def sigma(self):
        return math.sqrt(self.kernel_spread) if self.spread_is_variance else self.kernel_spread

    @property
    def size(self):
        return self.resolution[0] * self.resolution[1]

    def birth_edges(self):
        lo, hi = self.birth_range
        if self.pixel_size is not None:
            hi = lo + self.pixel_size * self.resolution[1]
        return np.linspace(lo, hi, self.resolution[1] + 1)

    def persistence_edges(self):
        lo, hi = self.persistence_range
        if self.pixel_size is not None:
            hi = lo + self.pixel_size * self.resolution[0]
        return np.linspace(lo, hi, self.resolution[0] + 1)

    def weight(self, persistence):
        return np.clip(np.asarray(persistence, dtype=np.float64) / self.persistence_range[1], 0.0, 1.0)


def _bin_masses(centers, edges, sigma):
    """Gaussian mass of every bin for every center, shape (len(centers), bins)."""
    cdf = 0.5 * erf((edges[None, :] - centers[:, None]) / (sigma * math.sqrt(2.0)))
    return np.diff(cdf, axis=1)


def pd_to_pi(pd, params: PiParams = PiParams()) -> np.ndarray:
    pd = np.asarray(pd, dtype=np.float64).reshape(-1, 2)
    rows, cols = params.resolution
    if len(pd) == 0:
        return np.zeros((rows, cols))
    birth = pd[:, 0]
    pers = pd[:, 1] - pd[:, 0]
    w = params.weight(pers)
    bx = _bin_masses(birth, params.birth_edges(), params.sigma)
    py = _bin_masses(pers, params.persistence_edges(), params.sigma)
    img = (py * w[:, None]).T @ bx
    return np.maximum(img, 0.0)


def vectorize(pi) -> np.ndarray:
    return np.ascontiguousarray(pi).reshape(-1)


def unvectorize(vec, params: PiParams = PiParams()) -> np.ndarray:
    return np.asarray(vec).reshape(params.resolution)


def write_pi_csv(path, pi):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in np.asarray(pi)])


def read_pi_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_pi_png(path, pi):
    """8-bit grayscale, max-normalized, persistence increasing upwards."""
    from PIL import Image

    pi = np.asarray(pi, dtype=np.float64)
    peak = pi.max()
    img = np.zeros(pi.shape, dtype=np.uint8) if peak <= 0 else np.round(255 * pi / peak).astype(np.uint8)
    Image.fromarray(img[::-1]).save(path)
