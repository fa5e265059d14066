"""Numerically stable primitives for the standard Gumbel distribution.

Everything is done in the log domain: a truncated draw is produced as
``-logaddexp(-bound, -g)`` with ``g ~ Gumbel(location)``, which is stable for
bounds far above or below the location and is exactly ``<= bound`` in floating
point. ``+inf`` is a first-class bound meaning "no truncation".
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "gumbel_log_cdf",
    "sample_standard_gumbel",
    "sample_truncated_gumbel",
    "standard_gumbel_from_uniform",
    "truncated_gumbel_from_uniform",
    "uniform_open",
]


def uniform_open(rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Uniform draw(s) on the open interval (0, 1).

    ``-log(-log(u))`` is singular at both endpoints, so exact 0.0 / 1.0 draws
    (probability ~2^-53 each) are rejected and redrawn.
    """
    u = rng.random(size)
    if size is None:
        while u <= 0.0 or u >= 1.0:
            u = rng.random()
        return u
    bad = (u <= 0.0) | (u >= 1.0)
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum()))
        bad = (u <= 0.0) | (u >= 1.0)
    return u


def standard_gumbel_from_uniform(u):
    """Map uniform(0,1) draws to standard Gumbel draws via the inverse CDF."""
    return -np.log(-np.log(u))


def truncated_gumbel_from_uniform(u, location, bound):
    """Gumbel(location) draws conditioned on being <= bound, from uniforms.

    Equivalent to drawing ``g ~ Gumbel(location)`` and returning
    ``-logaddexp(-bound, -g)``; the result never exceeds ``bound`` (exactly,
    not just statistically) and an infinite bound reproduces ``g`` unchanged.
    """
    g = location + standard_gumbel_from_uniform(u)
    return -np.logaddexp(-np.asarray(bound, dtype=np.float64), -g)


def sample_standard_gumbel(rng: np.random.Generator) -> float:
    """One draw with CDF exp(-exp(-x))."""
    return float(standard_gumbel_from_uniform(uniform_open(rng)))


def gumbel_log_cdf(x: float, location: float = 0.0) -> float:
    """log F(x) for the Gumbel(location) distribution: -exp(-(x - location))."""
    return -np.exp(-(np.asarray(x, dtype=np.float64) - location))


def sample_truncated_gumbel(location: float, bound: float, rng: np.random.Generator) -> float:
    """One Gumbel(location) draw conditioned on value <= bound.

    ``bound = +inf`` makes the truncation vacuous and returns an unconditional
    Gumbel(location) draw.
    """
    return float(truncated_gumbel_from_uniform(uniform_open(rng), location, bound))
