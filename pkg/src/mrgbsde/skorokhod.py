"""Skorokhod and backward Skorokhod problems with two nonlinear boundaries.

Constraints are l(t, x) <= 0 <= r(t, x) with l, r strictly increasing in x,
so the admissible set at time t is the interval [root of r, root of l]. The
forward map projects the free evolution onto that interval step by step; the
backward problem is solved only through time reversal of a forward one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AssumptionViolation, GridMismatch, InadmissibleAnchor, RootFindingError

DEFAULT_TOL = 1e-9
BISECTION_BUDGET = 128
FAR_POINTS = (-1e8, 1e8)


class TimeCurve:
    """Continuous piecewise-linear function of time, constant beyond its end knots."""

    def __init__(self, knots: Sequence[Sequence[float]] | float = 0.0):
        if np.isscalar(knots):
            knots = [(0.0, float(knots))]
        pts = np.asarray(knots, dtype=float).reshape(-1, 2)
        if len(pts) == 0 or not np.all(np.isfinite(pts)):
            raise ValueError("time curve needs finite knots")
        if np.any(np.diff(pts[:, 0]) <= 0):
            raise ValueError("knot times must be strictly increasing")
        self.knots = pts

    def __call__(self, t):
        if len(self.knots) == 1:
            return np.full(np.shape(t), self.knots[0, 1]) if np.ndim(t) else float(self.knots[0, 1])
        return np.interp(t, self.knots[:, 0], self.knots[:, 1])

    def to_config(self):
        if len(self.knots) == 1:
            return float(self.knots[0, 1])
        return [[float(t), float(v)] for t, v in self.knots]


class Boundary:
    """A map (t, x) -> value, strictly increasing in x with slopes in [c, C]."""

    c: float
    C: float

    def value(self, t: float, x):
        raise NotImplementedError

    def roots(self, times: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
        """Zeros in x at each time, by vectorized bisection.

        The bracket |root| <= |value(t, 0)| / c follows from the lower
        Lipschitz bound. Subclasses relying on this must accept array-valued
        ``t`` in ``value``.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        at0 = np.asarray(self.value(times, np.zeros_like(times)), dtype=float)
        radius = np.abs(at0) / self.c * (1.0 + 1e-12) + 1e-300
        lo, hi = -radius, radius.copy()

        def evaluate(xs):
            return np.asarray(self.value(times, xs), dtype=float)

        if np.any(evaluate(lo) > 0) or np.any(evaluate(hi) < 0):
            raise RootFindingError("Lipschitz bracket does not contain the root")
        for _ in range(BISECTION_BUDGET):
            mid = 0.5 * (lo + hi)
            done = (mid == lo) | (mid == hi)
            if np.all(done):
                break
            pos = evaluate(mid) > 0
            hi = np.where(pos & ~done, mid, hi)
            lo = np.where(~pos & ~done, mid, lo)
        else:
            if np.any(hi - lo > tol / 4):
                raise RootFindingError(f"bisection did not reach tolerance {tol / 4} in {BISECTION_BUDGET} steps")
        return 0.5 * (lo + hi)

    def to_config(self) -> dict:
        raise NotImplementedError


class AffineBoundary(Boundary):
    """kappa (x - b(t)) with kappa > 0."""

    def __init__(self, kappa: float, b: TimeCurve | float | Sequence = 0.0):
        if not kappa > 0:
            raise AssumptionViolation("slope kappa must be positive", "strictly increasing boundary")
        self.kappa = float(kappa)
        self.b = b if isinstance(b, TimeCurve) else TimeCurve(b)
        self.c = self.C = self.kappa

    def value(self, t, x):
        return self.kappa * (np.asarray(x, dtype=float) - self.b(t))

    def roots(self, times, tol=DEFAULT_TOL):
        return np.asarray(self.b(np.atleast_1d(np.asarray(times, dtype=float))), dtype=float)

    def to_config(self):
        return {"family": "affine", "kappa": self.kappa, "b": self.b.to_config()}


class SoftBoundary(Boundary):
    """k1 x + k2 atan(x) - b(t) with k1 > 0 and k1 + k2 > 0."""

    def __init__(self, k1: float, k2: float = 0.0, b: TimeCurve | float | Sequence = 0.0):
        if not (k1 > 0 and k1 + k2 > 0):
            raise AssumptionViolation("need k1 > 0 and k1 + k2 > 0", "strictly increasing boundary")
        self.k1, self.k2 = float(k1), float(k2)
        self.b = b if isinstance(b, TimeCurve) else TimeCurve(b)
        self.c = min(self.k1, self.k1 + self.k2)
        self.C = max(self.k1, self.k1 + self.k2)

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.k1 * x + self.k2 * np.arctan(x) - self.b(t)

    def to_config(self):
        return {"family": "soft", "k1": self.k1, "k2": self.k2, "b": self.b.to_config()}


class TabulatedBoundary(Boundary):
    """Rows of values on a shift lattice, one row per grid time.

    Evaluation interpolates linearly in x and extrapolates with the end
    slopes; times must match a tabulated time up to rounding.
    """

    def __init__(self, times, lattice, table):
        self.times = np.asarray(times, dtype=float)
        self.lattice = np.asarray(lattice, dtype=float)
        self.table = np.asarray(table, dtype=float)
        if self.table.shape != (len(self.times), len(self.lattice)):
            raise ValueError("table must have shape (len(times), len(lattice))")
        if len(self.lattice) < 2 or np.any(np.diff(self.lattice) <= 0):
            raise ValueError("lattice must be strictly increasing with >= 2 points")
        slopes = np.diff(self.table, axis=1) / np.diff(self.lattice)
        if not np.all(slopes > 0):
            raise AssumptionViolation("tabulated boundary is not strictly increasing in x", "strict monotonicity")
        self.c = float(slopes.min())
        self.C = float(slopes.max())
        self._left_slope = slopes[:, 0]
        self._right_slope = slopes[:, -1]

    def _row(self, t: float) -> int:
        span = max(1.0, abs(self.times[-1]))
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * span:
            raise GridMismatch(f"time {t} is not tabulated")
        return i

    def value(self, t, x):
        i = self._row(float(t))
        x = np.asarray(x, dtype=float)
        row, lat = self.table[i], self.lattice
        out = np.interp(x, lat, row)
        out = np.where(x < lat[0], row[0] + self._left_slope[i] * (x - lat[0]), out)
        return np.where(x > lat[-1], row[-1] + self._right_slope[i] * (x - lat[-1]), out)

    def roots(self, times, tol=DEFAULT_TOL):
        out = []
        for t in np.atleast_1d(times):
            row = self.table[self._row(float(t))]
            if not row[0] <= 0.0 <= row[-1]:
                raise RootFindingError(f"root at t={float(t)} escapes the shift lattice [{self.lattice[0]}, {self.lattice[-1]}]")
            out.append(np.interp(0.0, row, self.lattice))
        return np.array(out)

    def to_config(self):
        return {
            "family": "tabulated",
            "times": self.times.tolist(),
            "lattice": self.lattice.tolist(),
            "table": self.table.tolist(),
        }


class ReversedBoundary(Boundary):
    """t -> base(total - t, x): the boundary seen in reversed time."""

    def __init__(self, base: Boundary, total: float):
        self.base = base
        self.total = float(total)
        self.c, self.C = base.c, base.C

    def value(self, t, x):
        return self.base.value(self.total - t, x)

    def roots(self, times, tol=DEFAULT_TOL):
        return self.base.roots(self.total - np.atleast_1d(np.asarray(times, dtype=float)), tol)

    def to_config(self):
        return {"family": "reversed", "total": self.total, "base": self.base.to_config()}


def boundary_from_config(spec: dict) -> Boundary:
    spec = dict(spec)
    family = spec.pop("family", None)
    if family == "affine":
        return AffineBoundary(spec["kappa"], TimeCurve(spec.get("b", 0.0)))
    if family == "soft":
        return SoftBoundary(spec["k1"], spec.get("k2", 0.0), TimeCurve(spec.get("b", 0.0)))
    if family == "tabulated":
        return TabulatedBoundary(spec["times"], spec["lattice"], spec["table"])
    if family == "reversed":
        return ReversedBoundary(boundary_from_config(spec["base"]), spec["total"])
    raise ValueError(f"unknown boundary family {family!r}")


@dataclass
class BoundaryPair:
    """Lower constraint l and upper constraint r with l <= 0 <= r required.

    ``c_lo`` / ``C_hi`` default to the weakest constants of the two
    families; ``gap`` defaults to the sampled inf of r - l.
    """

    l: Boundary
    r: Boundary
    c_lo: float | None = None
    C_hi: float | None = None
    gap: float | None = None

    def __post_init__(self):
        if self.c_lo is None:
            self.c_lo = min(self.l.c, self.r.c)
        if self.C_hi is None:
            self.C_hi = max(self.l.C, self.r.C)
        if not 0 < self.c_lo <= self.C_hi:
            raise AssumptionViolation(f"need 0 < c <= C, got c={self.c_lo}, C={self.C_hi}", "bi-Lipschitz bounds")

    def validate(self, times: np.ndarray, xs: np.ndarray | None = None) -> dict:
        """Check monotonicity, bi-Lipschitz bounds and separation on a (t, x) sample."""
        times = np.asarray(times, dtype=float)
        if xs is None:
            roots = np.concatenate([self.l.roots(times), self.r.roots(times)])
            xs = np.linspace(roots.min() - 2.0, roots.max() + 2.0, 101)
        xs = np.unique(np.asarray(xs, dtype=float))
        rel = 1e-9
        min_sep = math.inf
        for t in times:
            lv, rv = self.l.value(t, xs), self.r.value(t, xs)
            for name, vals in (("l", lv), ("r", rv)):
                q = np.diff(vals) / np.diff(xs)
                if np.any(q <= 0):
                    raise AssumptionViolation(f"{name}(t={t}, .) is not strictly increasing", "strict monotonicity")
                if q.min() < self.c_lo * (1 - rel) - 1e-12 or q.max() > self.C_hi * (1 + rel) + 1e-12:
                    raise AssumptionViolation(
                        f"{name}(t={t}, .) slopes in [{q.min():.6g}, {q.max():.6g}] leave [c, C] = [{self.c_lo}, {self.C_hi}]",
                        "bi-Lipschitz bounds",
                    )
            min_sep = min(min_sep, float(np.min(rv - lv)))
        if self.gap is None:
            self.gap = min_sep
        if not min_sep > 0 or min_sep < self.gap * (1 - rel):
            raise AssumptionViolation(f"inf (r - l) = {min_sep:.6g} below declared gap {self.gap}", "separation gap")
        return {"c": self.c_lo, "C": self.C_hi, "gap": self.gap, "sampled_separation": min_sep}

    def reversed(self, total: float) -> "BoundaryPair":
        return BoundaryPair(ReversedBoundary(self.l, total), ReversedBoundary(self.r, total), self.c_lo, self.C_hi, self.gap)

    def to_config(self) -> dict:
        return {"l": self.l.to_config(), "r": self.r.to_config(), "c": self.c_lo, "C": self.C_hi, "gap": self.gap}

    @classmethod
    def from_config(cls, spec: dict) -> "BoundaryPair":
        return cls(boundary_from_config(spec["l"]), boundary_from_config(spec["r"]), spec.get("c"), spec.get("C"), spec.get("gap"))


@dataclass(frozen=True, eq=False)
class InputPath:
    """Grid samples of a continuous input s (linear in between), with an optional anchor."""

    times: np.ndarray
    values: np.ndarray
    anchor: float | None = None

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        values = np.array(self.values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or len(times) < 2:
            raise ValueError("times and values must be 1-d arrays of equal length >= 2")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("input path must be finite")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def to_json(self) -> str:
        return json.dumps({"times": self.times.tolist(), "values": self.values.tolist(), "anchor": self.anchor})

    @classmethod
    def from_json(cls, text: str) -> "InputPath":
        d = json.loads(text)
        return cls(d["times"], d["values"], d.get("anchor"))


@dataclass(frozen=True, eq=False)
class SkorokhodSolution:
    """(x, k = k_r - k_l) on the grid of the input plus certificates.

    For backward solutions ``forward`` holds the reversed forward solve.
    """

    kind: str
    times: np.ndarray
    s: np.ndarray
    x: np.ndarray
    k_r: np.ndarray
    k_l: np.ndarray
    lower_root: np.ndarray
    upper_root: np.ndarray
    boundaries: BoundaryPair
    anchor: float | None = None
    tol: float = DEFAULT_TOL
    forward: "SkorokhodSolution | None" = None
    certificates: dict = field(default_factory=dict)

    @property
    def k(self) -> np.ndarray:
        return self.k_r - self.k_l

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "k", "k_r", "k_l"])
            for row in zip(self.times, self.x, self.k, self.k_r, self.k_l):
                w.writerow([repr(float(v)) for v in row])


def _certify(sol: SkorokhodSolution, left_paired: bool) -> dict:
    b = sol.boundaries
    lv = np.array([float(b.l.value(t, x)) for t, x in zip(sol.times, sol.x)])
    rv = np.array([float(b.r.value(t, x)) for t, x in zip(sol.times, sol.x)])
    dkl = np.diff(sol.k_l, prepend=0.0)
    dkr = np.diff(sol.k_r, prepend=0.0)
    if left_paired:
        # backward increments over [t_i, t_{i+1}] act at x_{t_i}
        dkl = np.append(np.diff(sol.k_l), 0.0)
        dkr = np.append(np.diff(sol.k_r), 0.0)
    if sol.kind == "sp":
        decomposition = float(np.max(np.abs(sol.x - sol.s - sol.k)))
    else:
        a = sol.x[-1]
        decomposition = float(np.max(np.abs(sol.x - (a + sol.s[-1] - sol.s + sol.k[-1] - sol.k))))
    return {
        "constraint_l": float(np.max(np.maximum(lv, 0.0))),
        "constraint_r": float(np.max(np.maximum(-rv, 0.0))),
        "flatness_l": float(np.sum(np.abs(lv) * dkl)),
        "flatness_r": float(np.sum(np.abs(rv) * dkr)),
        "total_k_l": float(sol.k_l[-1]),
        "total_k_r": float(sol.k_r[-1]),
        "simultaneous_push": bool(np.any((dkl > 0) & (dkr > 0))),
        "decomposition_residual": decomposition,
    }


def solve_sp(s: InputPath, b: BoundaryPair, tol: float = DEFAULT_TOL) -> SkorokhodSolution:
    """Forward Skorokhod map: x = s + k with k = k_r - k_l.

    At each grid time the free point s_i + k_{i-1} is projected onto
    [root of r, root of l]; k_r grows only at the lower end, k_l only at the
    upper end. Points exactly on a boundary are not pushed.
    """
    times = s.times
    lower = b.r.roots(times, tol)
    upper = b.l.roots(times, tol)
    if np.any(upper <= lower):
        raise AssumptionViolation("admissible interval is empty at some grid time", "separation gap")
    n = len(times)
    x = np.empty(n)
    k_r = np.empty(n)
    k_l = np.empty(n)
    kr = kl = 0.0
    for i in range(n):
        free = s.values[i] + (kr - kl)
        if free > upper[i]:
            kl += free - upper[i]
            xi = upper[i]
        elif free < lower[i]:
            kr += lower[i] - free
            xi = lower[i]
        else:
            xi = free
        x[i], k_r[i], k_l[i] = xi, kr, kl
    sol = SkorokhodSolution("sp", times, s.values, x, k_r, k_l, lower, upper, b, None, tol)
    sol.certificates.update(_certify(sol, left_paired=False))
    return sol


def reversed_problem(s: InputPath, b: BoundaryPair, anchor: float) -> tuple[InputPath, BoundaryPair]:
    """Forward data whose solution, read backward, solves the backward problem.

    s_bar(t) = a + s_T - s_{T - t} on the reversed clock and boundaries read at
    T - t.
    """
    times = s.times
    total = times[0] + times[-1]
    rev_times = total - times[::-1]
    rev_values = anchor + s.values[-1] - s.values[::-1]
    return InputPath(rev_times, rev_values), b.reversed(total)


def solve_bsp(
    s: InputPath,
    b: BoundaryPair,
    tol: float = DEFAULT_TOL,
    anchor: float | None = None,
    anchor_tol: float | None = None,
) -> SkorokhodSolution:
    """Backward Skorokhod map x_t = a + s_T - s_t + k_T - k_t with k_0 = 0.

    The anchor (``s.anchor`` unless given) must satisfy l(T, a) <= 0 <= r(T, a);
    violations within ``anchor_tol`` (default ``tol``) are projected onto the
    admissible interval.
    """
    anchor_tol = tol if anchor_tol is None else anchor_tol
    a = s.anchor if anchor is None else anchor
    if a is None:
        raise ValueError("backward problem needs an anchor")
    t_end = s.times[-1]
    lv, rv = float(b.l.value(t_end, a)), float(b.r.value(t_end, a))
    if lv > anchor_tol or rv < -anchor_tol:
        raise InadmissibleAnchor(f"l(T, a) = {lv:.6g}, r(T, a) = {rv:.6g}", "terminal constraint l(T,a) <= 0 <= r(T,a)")
    if lv > 0 or rv < 0:
        lo = float(b.r.roots(np.array([t_end]), tol)[0])
        hi = float(b.l.roots(np.array([t_end]), tol)[0])
        a = min(max(a, lo), hi)
    rev_s, rev_b = reversed_problem(s, b, a)
    fwd = solve_sp(rev_s, rev_b, tol)
    k_r = fwd.k_r[-1] - fwd.k_r[::-1]
    k_l = fwd.k_l[-1] - fwd.k_l[::-1]
    sol = SkorokhodSolution(
        "bsp",
        s.times,
        s.values,
        fwd.x[::-1].copy(),
        k_r,
        k_l,
        fwd.lower_root[::-1].copy(),
        fwd.upper_root[::-1].copy(),
        b,
        a,
        tol,
        forward=fwd,
    )
    sol.certificates.update(_certify(sol, left_paired=True))
    return sol


def boundary_distance(b1: Boundary, b2: Boundary, times: np.ndarray, xs: np.ndarray) -> float:
    """Sampled sup |b1 - b2| over times x (xs plus two far points)."""
    lattice = np.concatenate([np.asarray(xs, dtype=float), FAR_POINTS])
    return max(float(np.max(np.abs(b1.value(t, lattice) - b2.value(t, lattice)))) for t in times)


def _certificate_lattice(sol1: SkorokhodSolution, sol2: SkorokhodSolution) -> np.ndarray:
    pts = np.concatenate([sol1.x, sol2.x, sol1.lower_root, sol1.upper_root, sol2.lower_root, sol2.upper_root])
    return np.linspace(pts.min() - 1.0, pts.max() + 1.0, 201)


def _check_pair(sol1: SkorokhodSolution, sol2: SkorokhodSolution, kind: str) -> None:
    if sol1.kind != kind or sol2.kind != kind:
        raise ValueError(f"both solutions must be of kind {kind!r}")
    if sol1.times.shape != sol2.times.shape or np.max(np.abs(sol1.times - sol2.times)) > 1e-12:
        raise GridMismatch("solutions live on different grids")


def stability_certificate_sp(sol1: SkorokhodSolution, sol2: SkorokhodSolution, xs: np.ndarray | None = None) -> dict:
    """sup|K1 - K2| against (C/c) sup|s1 - s2| + (1/c)(Lbar v Rbar)."""
    _check_pair(sol1, sol2, "sp")
    c = min(sol1.boundaries.c_lo, sol2.boundaries.c_lo)
    C = max(sol1.boundaries.C_hi, sol2.boundaries.C_hi)
    xs = _certificate_lattice(sol1, sol2) if xs is None else xs
    lbar = boundary_distance(sol1.boundaries.l, sol2.boundaries.l, sol1.times, xs)
    rbar = boundary_distance(sol1.boundaries.r, sol2.boundaries.r, sol1.times, xs)
    lhs = float(np.max(np.abs(sol1.k - sol2.k)))
    rhs = C / c * float(np.max(np.abs(sol1.s - sol2.s))) + max(lbar, rbar) / c
    return {"lhs": lhs, "rhs": rhs, "slack": rhs - lhs, "c": c, "C": C, "L_bar": lbar, "R_bar": rbar}


def stability_certificate_bsp(sol1: SkorokhodSolution, sol2: SkorokhodSolution, xs: np.ndarray | None = None) -> dict:
    """sup|k1 - k2| against 2(C/c)|a1 - a2| + 4(C/c) sup|s1 - s2| + (2/c)(Lbar v Rbar)."""
    _check_pair(sol1, sol2, "bsp")
    c = min(sol1.boundaries.c_lo, sol2.boundaries.c_lo)
    C = max(sol1.boundaries.C_hi, sol2.boundaries.C_hi)
    xs = _certificate_lattice(sol1, sol2) if xs is None else xs
    lbar = boundary_distance(sol1.boundaries.l, sol2.boundaries.l, sol1.times, xs)
    rbar = boundary_distance(sol1.boundaries.r, sol2.boundaries.r, sol1.times, xs)
    lhs = float(np.max(np.abs(sol1.k - sol2.k)))
    rhs = (
        2.0 * C / c * abs(sol1.anchor - sol2.anchor)
        + 4.0 * C / c * float(np.max(np.abs(sol1.s - sol2.s)))
        + 2.0 * max(lbar, rbar) / c
    )
    return {"lhs": lhs, "rhs": rhs, "slack": rhs - lhs, "c": c, "C": C, "L_bar": lbar, "R_bar": rbar}
