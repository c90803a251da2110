"""Seeded synthetic observations.

All randomness goes through ``numpy.random.Generator(PCG64(seed))``; noise is
``gamma * standard_normal`` (numpy's ziggurat sampler), so values are
reproducible across platforms for a given seed and draw order.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..gp_core import Observations


def make_rng(seed) -> np.random.Generator:
    """Generator for an integer seed; an existing generator is passed through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def synthesize_observations(true_field: Callable | np.ndarray, points, gamma: float, seed=0,
                            precision: float | None = None) -> Observations:
    """Values of ``true_field`` at ``points`` plus ``N(0, gamma^2)`` noise.

    Parameters
    ----------
    true_field
        Callable on ``(n, d)`` points, or the exact values at ``points``.
    gamma
        Noise standard deviation, ``>= 0``.
    seed
        Integer seed or a ``Generator`` (draws continue from its state).
    precision
        Data weight attached to the observations; defaults to ``1/gamma^2``
        (``1e6`` when ``gamma = 0``).
    """
    if not gamma >= 0:
        raise ValueError("gamma must be >= 0")
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    exact = true_field(pts) if callable(true_field) else true_field
    exact = np.asarray(exact, dtype=float).ravel()
    if exact.shape[0] != pts.shape[0]:
        raise ValueError("one true value per observation point required")
    rng = make_rng(seed)
    values = exact + gamma * rng.standard_normal(exact.shape[0])
    if precision is None:
        precision = 1.0 / gamma ** 2 if gamma > 0 else 1e6
    return Observations(pts, values, precision)


def choose_nodes(n_nodes: int, count: int, rng) -> np.ndarray:
    """``count`` distinct node indices, drawn without replacement."""
    if count > n_nodes:
        raise ValueError(f"cannot draw {count} distinct nodes out of {n_nodes}")
    return make_rng(rng).choice(n_nodes, count, replace=False)


def uniform_points(count: int, dims: int, lower: float, period: float, rng) -> np.ndarray:
    """``count`` points drawn uniformly from ``[lower, lower + period)^dims``."""
    return make_rng(rng).uniform(lower, lower + period, (count, dims))
