"""Seeded instance generators shared by the module and acceptance tests."""

from __future__ import annotations

import numpy as np

from mrgbsde.engine import GridSpec, Payoff, VolatilityBand, expectations_at_origin
from mrgbsde.gbsde import GeneratorSpec, solve_gbsde
from mrgbsde.reflection import LossFunction, LossSpec
from mrgbsde.skorokhod import BoundaryPair, InputPath, SoftBoundary, TimeCurve

TIMES = np.linspace(0.0, 1.0, 201)


def sawtooth(rng, times=TIMES) -> np.ndarray:
    teeth = rng.integers(1, 8)
    amp = rng.uniform(0.3, 3.0)
    phase = (times * teeth + rng.uniform()) % 1.0
    return amp * (1.0 - 2.0 * np.abs(2.0 * phase - 1.0))


def random_walk(rng, times=TIMES, scale=None) -> np.ndarray:
    scale = rng.uniform(0.3, 3.0) if scale is None else scale
    steps = rng.normal(0.0, scale * np.sqrt(np.diff(times)))
    return np.concatenate([[0.0], np.cumsum(steps)])


def skorokhod_input(rng, times=TIMES) -> np.ndarray:
    return sawtooth(rng, times) if rng.uniform() < 0.5 else random_walk(rng, times)


def _curve(rng, centre: float, times=TIMES) -> TimeCurve:
    knots = np.linspace(times[0], times[-1], rng.integers(2, 6))
    return TimeCurve([[t, centre + rng.uniform(-0.3, 0.3)] for t in knots])


def soft_pair(rng, times=TIMES, k1=None, k2=None) -> BoundaryPair:
    """Soft boundaries sharing slopes, so the separation is b_l - b_r > 0."""
    k1 = rng.uniform(0.5, 2.0) if k1 is None else k1
    k2 = rng.uniform(-0.4, 0.8) * k1 if k2 is None else k2
    width = rng.uniform(0.8, 2.0)
    b_l = _curve(rng, 0.5 * width, times)
    b_r = _curve(rng, -0.5 * width, times)
    return BoundaryPair(SoftBoundary(k1, k2, b_l), SoftBoundary(k1, k2, b_r))


def perturbed(rng, pair: BoundaryPair, size: float, times=TIMES) -> BoundaryPair:
    def shift(b: SoftBoundary) -> SoftBoundary:
        knots = b.b.knots.copy()
        knots[:, 1] += rng.uniform(-size, size, len(knots))
        return SoftBoundary(b.k1, b.k2 * (1 + rng.uniform(-size, size)), TimeCurve(knots))

    return BoundaryPair(shift(pair.l), shift(pair.r))


def stability_pair(rng, backward: bool):
    """Two nearby (input, boundaries) problems; BSP anchors sit inside the terminal interval."""
    s1 = skorokhod_input(rng)
    s2 = s1 + rng.uniform(0.0, 0.3) * random_walk(rng, scale=1.0)
    b1 = soft_pair(rng)
    b2 = perturbed(rng, b1, rng.uniform(0.0, 0.2))
    if not backward:
        return InputPath(TIMES, s1), b1, InputPath(TIMES, s2), b2
    anchors = []
    for b in (b1, b2):
        lo = float(b.r.roots(TIMES[-1:])[0])
        hi = float(b.l.roots(TIMES[-1:])[0])
        anchors.append((lo, hi))
    lo, hi = max(anchors[0][0], anchors[1][0]), min(anchors[0][1], anchors[1][1])
    a1, a2 = rng.uniform(lo, hi, 2)
    return InputPath(TIMES, s1, a1), b1, InputPath(TIMES, s2, a2), b2


BAND = VolatilityBand(0.25, 1.0)
CONTRACTION_GRID = GridSpec(0.0, 1.0, 100, -6.0, 6.0, 81)


def bounded_instance(rng, band=BAND, grid=CONTRACTION_GRID):
    """Random bounded mean-reflected instance whose barriers bind somewhere.

    The affine barriers are placed inside the range of the unreflected mean
    path and relax to it at maturity so the terminal anchor is admissible.
    """
    gen = GeneratorSpec(
        a_g=rng.uniform(-0.5, 0.5),
        b_g=rng.uniform(-0.3, 0.3),
        gamma_g=rng.uniform(0.0, 0.5),
        g0=rng.uniform(-0.2, 0.2),
    )
    terminal = Payoff.tanh(rng.uniform(0.5, 1.0), rng.uniform(0.3, 0.6), rng.uniform(-0.5, 0.5))
    free = solve_gbsde(terminal, gen, band, grid)
    m = expectations_at_origin(free.values, np.arange(grid.n_time + 1), band, grid)
    spread = m.max() - m.min()
    hi0 = m.max() - 0.3 * spread
    lo0 = m.min() + 0.3 * spread
    loss = LossSpec(
        LossFunction(1.0, 0.0, TimeCurve([[0.0, hi0], [1.0, m[-1] + 0.01]])),
        LossFunction(1.0, 0.0, TimeCurve([[0.0, lo0], [1.0, m[-1] - 0.01]])),
    )
    return terminal, gen, loss
