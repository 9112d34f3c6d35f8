"""BMO-type diagnostics on the volatility tree.

Everything here runs on the enumerable tree from :mod:`mrgbsde.engine`, not
on the PDE grid: these quantities are certificates at toy scale, where an
exact supremum over adapted controls is worth more than resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import Payoff, VolatilityBand, VolatilityTree

STOPPING_CLASS = "grid times x reachable tree nodes"


@dataclass(frozen=True)
class IntegrandPath:
    """A Markovian integrand Z_t = z(t, B_t) on [0, horizon].

    ``fn`` is vectorized in x. On the tree it is read at the left end of
    every step.
    """

    fn: Callable[[float, np.ndarray], np.ndarray]
    band: VolatilityBand
    horizon: float = 1.0
    label: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.broadcast_to(np.asarray(self.fn(t, x), dtype=float), x.shape)
        if not np.all(np.isfinite(out)):
            raise ValueError(f"integrand {self.label} is not finite at t={t}")
        return out

    @classmethod
    def constant(cls, c: float, band: VolatilityBand, horizon: float = 1.0) -> "IntegrandPath":
        return cls(lambda t, x: np.full_like(x, float(c)), band, horizon, "constant", {"value": c})

    @classmethod
    def switch_off(cls, c: float, t_off: float, band: VolatilityBand, horizon: float = 1.0) -> "IntegrandPath":
        """Z = c on [0, t_off), 0 afterwards."""
        return cls(
            lambda t, x: np.full_like(x, float(c) if t < t_off - 1e-12 else 0.0),
            band,
            horizon,
            "switch_off",
            {"value": c, "t_off": t_off},
        )

    @classmethod
    def from_solution(cls, sol) -> "IntegrandPath":
        """Z field of a G-BSDE solution, interpolated in space and time."""
        grid = sol.grid
        zs = sol.z_field
        xs = grid.xs

        def fn(t, x):
            pos = min(max((t - grid.t_start) / grid.dt, 0.0), grid.n_time)
            i0 = min(int(math.floor(pos + 1e-9)), grid.n_time - 1)
            w = min(max(pos - i0, 0.0), 1.0)
            lo = np.interp(x, xs, zs[i0])
            return lo if w == 0.0 else (1.0 - w) * lo + w * np.interp(x, xs, zs[i0 + 1])

        return cls(fn, sol.band, grid.horizon, "gbsde_z", {})

    def scaled(self, factor: float) -> "IntegrandPath":
        return IntegrandPath(lambda t, x: factor * self.fn(t, x), self.band, self.horizon, f"{factor}*{self.label}")


def _tree(z: IntegrandPath, depth: int) -> VolatilityTree:
    return VolatilityTree(z.band, z.horizon, depth)


def bmo_norm_estimate(z: IntegrandPath, tree_depth: int = 8) -> float:
    """Squared discrete BMO norm sup_tau E_tau[int_tau^T |Z|^2 d<B>].

    The sup runs over adapted controls (by dynamic programming) and over
    stopping times of the form (grid time, reachable node).
    """
    tree = _tree(z, tree_depth)
    lo, hi = tree.controls
    w = np.zeros_like(tree.x)
    best = 0.0
    for k in range(tree_depth - 1, -1, -1):
        zz = z(k * tree.dt, tree.x) ** 2
        lu, ld, hu, hd = tree.neighbours(w)
        w = np.maximum(zz * lo * tree.dt + 0.5 * (lu + ld), zz * hi * tree.dt + 0.5 * (hu + hd))
        best = max(best, float(np.max(w[tree.reachable(k)])))
    return best


def exponential_martingale(
    z: IntegrandPath, controls: Sequence[int], signs: Sequence[int], log: bool = False
) -> np.ndarray:
    """E(Z)_k = exp(sum Z dB - 1/2 sum Z^2 d<B>) along one tree scenario.

    ``controls[k]`` is 0 (sigma_low) or 1 (sigma_high) and ``signs[k]`` is +1
    or -1, so dB_k = sign * sigma * sqrt(dt). The exponent is accumulated in
    log space; pass ``log=True`` to get it instead of the exponential.
    """
    if len(controls) != len(signs) or len(controls) < 1:
        raise ValueError("controls and signs must have the same positive length")
    if not set(int(s) for s in signs) <= {-1, 1} or not set(int(c) for c in controls) <= {0, 1}:
        raise ValueError("signs must be +-1 and controls 0 or 1")
    n = len(controls)
    dt = z.horizon / n
    variances = (z.band.sigma_low_sq, z.band.sigma_high_sq)
    x = 0.0
    logs = np.zeros(n + 1)
    for k in range(n):
        var = variances[int(controls[k])]
        db = int(signs[k]) * math.sqrt(var * dt)
        zk = float(z(k * dt, np.array([x]))[0])
        logs[k + 1] = logs[k] + zk * db - 0.5 * zk * zk * var * dt
        x += db
    if log:
        return logs
    with np.errstate(over="ignore"):
        return np.exp(logs)


def reverse_holder_phi(q: float) -> float:
    """phi(q) = sqrt(1 + q^-2 log((2q - 1) / (2 (q - 1)))) - 1 for q > 1."""
    q = float(q)
    if not q > 1.0:
        raise ValueError(f"reverse Hoelder threshold needs q > 1, got {q}")
    if math.isinf(q):
        return 0.0
    return math.sqrt(1.0 + math.log((2.0 * q - 1.0) / (2.0 * (q - 1.0))) / (q * q)) - 1.0


def tilted_expectation(
    payoff: Payoff | Callable[[np.ndarray], np.ndarray],
    z: IntegrandPath,
    tree_depth: int = 8,
    running: Callable[[float, np.ndarray, np.ndarray, float, float], np.ndarray] | None = None,
) -> float:
    """sup over adapted controls of E[E(Z)_T X] on the tree.

    X = payoff(B_T) + sum_k running(t_k, B_k, Z_k, sigma_k^2, dt), so additive
    path functionals such as int Z d<B> are supported. The per-step density is
    exp(Z dB) / cosh(Z sigma sqrt(dt)), i.e. the exponential martingale with
    the exact one-step compensator of the binomial walk, which makes it a
    martingale under every control.
    """
    tree = _tree(z, tree_depth)
    v = np.asarray(payoff(tree.x), dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("payoff is not finite on the tree")
    for k in range(tree_depth - 1, -1, -1):
        t = k * tree.dt
        zk = z(t, tree.x)
        lu, ld, hu, hd = tree.neighbours(v)
        best = None
        for var, h, up, down in ((tree.controls[0], tree.h_low, lu, ld), (tree.controls[1], tree.h_high, hu, hd)):
            # up-weight e^{zh} / (2 cosh zh), written stably via tanh
            p_up = 0.5 * (1.0 + np.tanh(zk * h))
            cont = p_up * up + (1.0 - p_up) * down
            if running is not None:
                cont = cont + running(t, tree.x, zk, var, tree.dt)
            best = cont if best is None else np.maximum(best, cont)
        v = best
    n = tree_depth
    return float(v[n, n])


def girsanov_drift(t: float, x: np.ndarray, z: np.ndarray, var: float, dt: float) -> np.ndarray:
    """Running term -Z sigma^2 dt, so X = B_T - int Z d<B> with a linear payoff."""
    return -z * var * dt


def diagnostic_report(z: IntegrandPath, tree_depth: int = 8, qs: Sequence[float] = (1.5, 2.0, 10.0)) -> dict:
    """JSON-ready summary keyed by operation name."""
    sq = bmo_norm_estimate(z, tree_depth)
    return {
        "bmo_norm_estimate": {
            "squared_norm": sq,
            "norm": math.sqrt(sq),
            "tree_depth": tree_depth,
            "stopping_times": STOPPING_CLASS,
        },
        "reverse_holder_phi": {str(q): reverse_holder_phi(q) for q in qs},
        "tilted_expectation": {"unit_payoff": tilted_expectation(lambda x: np.ones_like(x), z, tree_depth)},
    }
