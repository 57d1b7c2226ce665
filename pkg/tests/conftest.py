import math

import numpy as np
import pytest

from tops_thor.filtration import SliceParams


def random_strip_slice(rng, n_strips=None, max_points=40, sigma2=2.5e-2, index=0, sigma1=0.1):
    """Aligned points of one z band whose strips and y ranges are known.

    Returns ``(points, expected_pd)`` where the expected diagram follows the
    analytic strip formula.
    """
    n_strips = n_strips or int(rng.integers(5, 51))
    strips = np.sort(rng.choice(60, size=n_strips, replace=False))
    pts, expected = [], []
    for j in strips:
        m = int(rng.integers(1, max_points + 1))
        x = (j + rng.uniform(0.05, 0.95, m)) * sigma2
        y = rng.uniform(0.0, 0.7, m)
        z = index * sigma1 + rng.uniform(0.0, 0.9 * sigma1, m)
        pts.append(np.stack([x, y, z], axis=1))
        b = (j + 1) * sigma2
        expected.append((b, b + (y.max() - y.min())))
    return np.concatenate(pts), np.array(sorted(expected))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def slice_params():
    return SliceParams()


def box_surface(rng, extents, n=2048):
    """Points uniformly on the surface of an axis-aligned box centred at 0."""
    e = np.asarray(extents, dtype=np.float64)
    areas = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]])
    face = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, (n, 3)) * e
    sign = rng.choice([-0.5, 0.5], size=n)
    pts[np.arange(n), face] = sign * e[face]
    return pts


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


QUARTER = math.pi / 4
