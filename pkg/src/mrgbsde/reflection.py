"""Doubly mean-reflected quadratic G-BSDEs.

The equation is

    Y_t = xi + int_t^T f ds + int_t^T g(s, Y_s, Z_s) d<B>_s - int_t^T Z dB
          - (K_T - K_t) + (A_T - A_t),
    E[L(t, Y_t)] <= 0 <= E[R(t, Y_t)],

with a deterministic A = A^R - A^L that acts only when a constraint is
tight. For a frozen y-argument U the solution is an unreflected G-BSDE
solution y plus a backward Skorokhod reflection of its mean path, and the
reflected equation is the fixed point of U -> Y^U, iterated on short time
intervals and stitched together. Unbounded data are handled by truncation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import GridSpec, Payoff, VolatilityBand, expectations_at_origin, write_field_csv
from .errors import AssumptionViolation, ContractionFailure, ConvergenceFailure, GridMismatch, RootFindingError
from .gbsde import GBSDESolution, GeneratorSpec, solve_gbsde, truncate
from .skorokhod import (
    AffineBoundary,
    BoundaryPair,
    InputPath,
    SkorokhodSolution,
    TabulatedBoundary,
    TimeCurve,
    solve_bsp,
)

DEFAULT_LATTICE = 257
DEFAULT_FP_TOL = 1e-9
DEFAULT_ANCHOR_TOL = 1e-4
ROUNDING_FLOOR = 1e-12
CERTIFICATE_TOLERANCES = {
    "constraint": 2e-3,
    "flatness_relative": 1e-3,
    "k_martingale": 5e-3,
    "k_increase": 1e-8,
    "monotonicity": 1e-12,
}


@dataclass(frozen=True)
class LossFunction:
    """y -> k1 y + k2 atan(y) - b(t), strictly increasing when k1 > 0 and k1 + k2 > 0."""

    k1: float = 1.0
    k2: float = 0.0
    b: TimeCurve = field(default_factory=TimeCurve)

    def __post_init__(self):
        if not isinstance(self.b, TimeCurve):
            object.__setattr__(self, "b", TimeCurve(self.b))
        if not (self.k1 > 0 and self.k1 + self.k2 > 0):
            raise AssumptionViolation(f"need k1 > 0 and k1 + k2 > 0, got ({self.k1}, {self.k2})", "strictly increasing loss")

    @property
    def c(self) -> float:
        return min(self.k1, self.k1 + self.k2)

    @property
    def C(self) -> float:
        return max(self.k1, self.k1 + self.k2)

    @property
    def is_affine(self) -> bool:
        return self.k2 == 0.0

    def __call__(self, t, y):
        y = np.asarray(y, dtype=float)
        out = self.k1 * y - self.b(t)
        if self.k2:
            out = out + self.k2 * np.arctan(y)
        return out

    def to_config(self) -> dict:
        return {"k1": self.k1, "k2": self.k2, "b": self.b.to_config()}

    @classmethod
    def from_config(cls, spec: dict) -> "LossFunction":
        return cls(float(spec.get("k1", 1.0)), float(spec.get("k2", 0.0)), TimeCurve(spec.get("b", 0.0)))


@dataclass
class LossSpec:
    """Constraint pair: E[L(t, Y_t)] <= 0 <= E[R(t, Y_t)].

    ``c``, ``C`` default to the weakest slopes of the pair; ``M`` and ``gap``
    default to sampled values over ``y_range`` (plus far points for the gap).
    """

    L: LossFunction
    R: LossFunction
    c: float | None = None
    C: float | None = None
    M: float | None = None
    gap: float | None = None
    y_range: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        if self.c is None:
            self.c = min(self.L.c, self.R.c)
        if self.C is None:
            self.C = max(self.L.C, self.R.C)
        if not 0 < self.c <= self.C:
            raise AssumptionViolation(f"need 0 < c <= C, got c={self.c}, C={self.C}", "bi-Lipschitz loss")
        if self.c > min(self.L.c, self.R.c) * (1 + 1e-12) or self.C < max(self.L.C, self.R.C) * (1 - 1e-12):
            raise AssumptionViolation("declared (c, C) do not bound the loss slopes", "bi-Lipschitz loss")

    def validate(self, times: Sequence[float]) -> dict:
        """Check growth and separation on the sample; fills M and gap when undeclared."""
        ys = np.linspace(self.y_range[0], self.y_range[1], 201)
        far = np.array([-1e8, 1e8])
        growth = 0.0
        sep = math.inf
        for t in times:
            for fn in (self.L, self.R):
                growth = max(growth, float(np.max(np.abs(fn(t, ys)) / (1.0 + np.abs(ys)))))
            both = np.concatenate([ys, far])
            sep = min(sep, float(np.min(self.R(t, both) - self.L(t, both))))
        if self.M is None:
            self.M = growth
        elif growth > self.M * (1 + 1e-12):
            raise AssumptionViolation(f"|L|, |R| <= M (1 + |y|) fails: need M >= {growth:.6g}", "linear growth")
        if not sep > 0:
            raise AssumptionViolation(f"inf (R - L) = {sep:.6g} is not positive", "separation gap")
        if self.gap is None:
            self.gap = sep
        elif sep < self.gap * (1 - 1e-12):
            raise AssumptionViolation(f"inf (R - L) = {sep:.6g} below declared gap {self.gap}", "separation gap")
        return {"c": self.c, "C": self.C, "M": self.M, "gap": self.gap}

    def to_config(self) -> dict:
        return {
            "L": self.L.to_config(),
            "R": self.R.to_config(),
            "c": self.c,
            "C": self.C,
            "M": self.M,
            "gap": self.gap,
            "y_range": list(self.y_range),
        }

    @classmethod
    def from_config(cls, spec: dict) -> "LossSpec":
        return cls(
            LossFunction.from_config(spec["L"]),
            LossFunction.from_config(spec["R"]),
            spec.get("c"),
            spec.get("C"),
            spec.get("M"),
            spec.get("gap"),
            tuple(spec.get("y_range", (-10.0, 10.0))),
        )


@dataclass(frozen=True, eq=False)
class ConstraintFunctions:
    """Mean-shift constraints l_u, r_u, the input s_u and anchor a of the backward problem.

    l_u(t, x) = E[L(t, y_t - mu_t + x)] with mu_t = E[y_t], s_u(t) = mu_0 - mu_t,
    a = mu_T.
    """

    l_u: object
    r_u: object
    s: InputPath
    mu: np.ndarray
    anchor: float
    lattice: np.ndarray | None = None

    @property
    def pair(self) -> BoundaryPair:
        return BoundaryPair(self.l_u, self.r_u)


def _affine_constraint(fn: LossFunction, centred: np.ndarray, times: np.ndarray, idx, band, grid) -> AffineBoundary:
    # k1 > 0 makes E[k1 (y - mu + x) - b] = k1 (E[y - mu] + x) - b, so one engine value per time suffices.
    offset = expectations_at_origin(centred, idx, band, grid)
    return AffineBoundary(fn.k1, TimeCurve(np.column_stack([times, fn.b(times) / fn.k1 - offset])))


def _tabulated_constraint(fn: LossFunction, centred, times, idx, lattice, band, grid, chunk: int = 16) -> TabulatedBoundary:
    n_t, n_lat = len(times), len(lattice)
    table = np.empty((n_t, n_lat))
    for i0 in range(0, n_t, chunk):
        rows, starts = [], []
        for i in range(i0, min(i0 + chunk, n_t)):
            rows.append(fn(times[i], centred[i][None, :] + lattice[:, None]))
            starts.append(np.full(n_lat, idx[i]))
        vals = expectations_at_origin(np.concatenate(rows), np.concatenate(starts), band, grid)
        table[i0 : i0 + len(rows)] = vals.reshape(len(rows), n_lat)
    return TabulatedBoundary(times, lattice, table)


def build_constraints(
    y_sol: GBSDESolution,
    loss: LossSpec,
    lattice: np.ndarray | None = None,
    n_lattice: int = DEFAULT_LATTICE,
    mean_grid: GridSpec | None = None,
) -> ConstraintFunctions:
    """Constraint functions of the backward problem from an unreflected solution.

    Means come from one batched engine sweep. Affine losses are exact with one
    engine value per time; softened losses are tabulated on a shift lattice,
    by default spanning the root bracket |root| <= |l_u(t, 0)| / c plus one
    unit on each side.

    Expectations are unconditional, i.e. swept back to the start of
    ``mean_grid`` (default: the solution's own grid), which must contain the
    solution grid as a window with the same mesh.
    """
    band = y_sol.band
    sub = y_sol.grid
    grid = sub if mean_grid is None else mean_grid
    times = sub.times
    first = grid.time_index(sub.t_start)
    if first + sub.n_time > grid.n_time or not grid.window(first, first + sub.n_time).same_mesh(sub):
        raise GridMismatch("solution grid is not a window of the mean grid")
    idx = first + np.arange(sub.n_time + 1)
    values = y_sol.values
    mu = expectations_at_origin(values, idx, band, grid)
    centred = values - mu[:, None]
    s = InputPath(times, mu[0] - mu, float(mu[-1]))
    if loss.L.is_affine and loss.R.is_affine:
        l_u = _affine_constraint(loss.L, centred, times, idx, band, grid)
        r_u = _affine_constraint(loss.R, centred, times, idx, band, grid)
        return ConstraintFunctions(l_u, r_u, s, mu, float(mu[-1]), None)
    if lattice is None:
        radius = 0.0
        for fn in (loss.L, loss.R):
            at0 = expectations_at_origin(fn(times[:, None], centred), idx, band, grid)
            radius = max(radius, float(np.max(np.abs(at0))) / loss.c)
        lattice = np.linspace(-radius - 1.0, radius + 1.0, n_lattice)
    lattice = np.asarray(lattice, dtype=float)
    sides = []
    for fn in (loss.L, loss.R):
        if fn.is_affine:
            sides.append(_affine_constraint(fn, centred, times, idx, band, grid))
        else:
            sides.append(_tabulated_constraint(fn, centred, times, idx, lattice, band, grid))
    return ConstraintFunctions(sides[0], sides[1], s, mu, float(mu[-1]), lattice)


@dataclass(eq=False)
class MRSolution:
    """Solution (Y, Z, K, A) on the grid, possibly stitched from several intervals.

    ``y`` is the unreflected part with Y_t = y_t + A_T - A_t; ``components``,
    ``reflections`` and ``constraints`` hold the per-interval pieces in time
    order and ``knots`` their grid indices.
    """

    grid: GridSpec
    band: VolatilityBand
    gen: GeneratorSpec
    loss: LossSpec
    y: np.ndarray
    z: np.ndarray
    a_r: np.ndarray
    a_l: np.ndarray
    mean_y: np.ndarray
    lower_root: np.ndarray
    upper_root: np.ndarray
    components: list[GBSDESolution] = field(default_factory=list)
    reflections: list[SkorokhodSolution] = field(default_factory=list)
    constraints: list[ConstraintFunctions] = field(default_factory=list)
    knots: list[int] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    gap_history: list[list[float]] = field(default_factory=list)
    certificates: dict = field(default_factory=dict)

    @property
    def a(self) -> np.ndarray:
        return self.a_r - self.a_l

    @property
    def Y(self) -> np.ndarray:
        a = self.a
        return self.y + (a[-1] - a)[:, None]

    @property
    def y0(self) -> float:
        return float(np.interp(0.0, self.grid.xs, self.Y[0]))

    @property
    def y_component(self) -> GBSDESolution:
        if len(self.components) != 1:
            raise ValueError("stitched solution has one component per interval")
        return self.components[0]

    def to_csv(self, path) -> None:
        """Columns t,a,a_r,a_l,mean_Y,lower_root,upper_root."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "a", "a_r", "a_l", "mean_Y", "lower_root", "upper_root"])
            cols = (self.grid.times, self.a, self.a_r, self.a_l, self.mean_y, self.lower_root, self.upper_root)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])

    def field_csv(self, path) -> None:
        """Columns t,x,y,z with y the reflected value Y."""
        write_field_csv(path, self.grid, {"y": self.Y, "z": self.z})


def _terminal_values(terminal: Payoff | np.ndarray, grid: GridSpec) -> np.ndarray:
    return terminal.sample(grid) if isinstance(terminal, Payoff) else np.asarray(terminal, dtype=float)


def solve_frozen(
    U: np.ndarray | None,
    terminal: Payoff | np.ndarray,
    gen: GeneratorSpec,
    loss: LossSpec,
    band: VolatilityBand,
    grid: GridSpec,
    n_lattice: int = DEFAULT_LATTICE,
    tol: float = 1e-9,
    anchor_tol: float = DEFAULT_ANCHOR_TOL,
    mean_grid: GridSpec | None = None,
) -> MRSolution:
    """Reflected solution for the generator with its y-argument frozen at U.

    Solves the unreflected equation, builds the mean-shift constraints and
    solves the backward Skorokhod problem by reversal. ``U=None`` lets the
    generator see its own solution (the unreflected equation). When ``grid``
    is a later window of a longer grid, pass that grid as ``mean_grid`` so the
    constraint means are taken from its start.
    """
    y_sol = solve_gbsde(terminal, gen, band, grid, frozen_y=U)
    cons = build_constraints(y_sol, loss, n_lattice=n_lattice, mean_grid=mean_grid)
    try:
        bsp = solve_bsp(cons.s, cons.pair, tol=tol, anchor_tol=anchor_tol)
    except RootFindingError as exc:
        raise RootFindingError(f"shift lattice too narrow: {exc}") from None
    a_r, a_l = bsp.k_r.copy(), bsp.k_l.copy()
    a = a_r - a_l
    # Global y is the unreflected part; Y = y + A_T - A_t.
    return MRSolution(
        grid,
        band,
        gen,
        loss,
        np.array(y_sol.values),
        np.array(y_sol.z_field),
        a_r,
        a_l,
        bsp.x.copy(),
        bsp.lower_root.copy(),
        bsp.upper_root.copy(),
        [y_sol],
        [bsp],
        [cons],
        [0, grid.n_time],
        [1],
        [[]],
    )


def contraction_constant(loss: LossSpec, gen: GeneratorSpec, band: VolatilityBand) -> float:
    """M(c, C, L1, sigma_high) = (1 + 3C/c) L1 sigma_high."""
    return (1.0 + 3.0 * loss.C / loss.c) * gen.L1 * band.sigma_high


def default_delta(loss: LossSpec, gen: GeneratorSpec, band: VolatilityBand, horizon: float, factor: float = 0.5) -> float:
    """Largest interval length with M delta <= factor, capped at the horizon."""
    m = contraction_constant(loss, gen, band)
    return horizon if m == 0 else min(horizon, factor / m)


def interval_knots(grid: GridSpec, delta: float) -> list[int]:
    """Grid indices of T_k = k T / n with n = ceil(T / delta)."""
    n = max(1, math.ceil(grid.horizon / delta - 1e-12))
    if n > grid.n_time:
        raise GridMismatch(f"{n} sub-intervals need at least {n} time steps, grid has {grid.n_time}")
    knots = [round(k * grid.n_time / n) for k in range(n + 1)]
    return knots


def _fixed_point(
    terminal,
    gen: GeneratorSpec,
    loss: LossSpec,
    band: VolatilityBand,
    grid: GridSpec,
    init,
    fp_tol: float,
    max_iter: int,
    n_lattice: int,
    anchor_tol: float,
    mean_grid: GridSpec,
) -> tuple[MRSolution, int, list[float]]:
    kwargs = dict(n_lattice=n_lattice, anchor_tol=anchor_tol, mean_grid=mean_grid)
    if gen.L1 == 0.0:
        return solve_frozen(None, terminal, gen, loss, band, grid, **kwargs), 1, []
    if isinstance(init, str) and init == "unreflected":
        U = np.array(solve_gbsde(terminal, gen, band, grid).values)
    elif isinstance(init, str) and init == "zero":
        U = np.zeros((grid.n_time + 1, grid.n_space))
    else:
        U = np.asarray(init, dtype=float)
        if U.shape != (grid.n_time + 1, grid.n_space):
            raise GridMismatch(f"initial field has shape {U.shape}, need {(grid.n_time + 1, grid.n_space)}")
    gaps: list[float] = []
    rising = 0
    for it in range(1, max_iter + 1):
        sol = solve_frozen(U, terminal, gen, loss, band, grid, **kwargs)
        Y = sol.Y
        scale = max(1.0, float(np.max(np.abs(Y))))
        gap = float(np.max(np.abs(Y - U)))
        gaps.append(gap)
        if gap <= fp_tol * scale:
            return sol, it, gaps
        if len(gaps) > 1 and gaps[-2] > ROUNDING_FLOOR * scale:
            rising = rising + 1 if gap > gaps[-2] else 0
            if rising >= 3:
                raise ContractionFailure(f"fixed-point gaps grew three times in a row: {gaps[-4:]}")
        U = Y
    raise ConvergenceFailure(f"fixed point not reached in {max_iter} iterations; last gaps {gaps[-3:]}")


def solve_bounded(
    terminal: Payoff | np.ndarray,
    gen: GeneratorSpec,
    loss: LossSpec,
    band: VolatilityBand,
    grid: GridSpec,
    delta: float | None = None,
    delta_factor: float = 0.5,
    init: str | np.ndarray = "unreflected",
    fp_tol: float = DEFAULT_FP_TOL,
    max_iter: int = 50,
    n_lattice: int = DEFAULT_LATTICE,
    anchor_tol: float = DEFAULT_ANCHOR_TOL,
) -> MRSolution:
    """Fixed point of U -> Y^U on sub-intervals of length <= delta, stitched backward.

    ``delta`` defaults to min(T, delta_factor / M). Each interval starts from
    ``init`` ("unreflected", "zero" or a full-grid field) and stops when the
    sup-norm change is below ``fp_tol`` times the value scale.
    """
    if delta is None:
        delta = default_delta(loss, gen, band, grid.horizon, delta_factor)
    knots = interval_knots(grid, delta)
    n_t, n_x = grid.n_time + 1, grid.n_space
    Y = np.empty((n_t, n_x))
    z = np.empty((n_t, n_x))
    a_r_loc = np.zeros(n_t)
    a_l_loc = np.zeros(n_t)
    mean_y = np.empty(n_t)
    lower = np.empty(n_t)
    upper = np.empty(n_t)
    pieces: list[MRSolution] = []
    term = _terminal_values(terminal, grid)
    for k in range(len(knots) - 2, -1, -1):
        i0, i1 = knots[k], knots[k + 1]
        sub = grid.window(i0, i1)
        sub_init = init if isinstance(init, str) else np.asarray(init)[i0 : i1 + 1]
        piece, iters, gaps = _fixed_point(
            term, gen, loss, band, sub, sub_init, fp_tol, max_iter, n_lattice, anchor_tol, grid
        )
        piece.iterations = [iters]
        piece.gap_history = [gaps]
        pieces.insert(0, piece)
        Y[i0 : i1 + 1] = piece.Y
        z[i0 : i1 + 1] = piece.z
        mean_y[i0 : i1 + 1] = piece.mean_y
        lower[i0 : i1 + 1] = piece.lower_root
        upper[i0 : i1 + 1] = piece.upper_root
        term = piece.Y[0]
    # Accumulate local reflections forward so that A_0 = 0 and A is continuous at knots.
    a_r = np.zeros(n_t)
    a_l = np.zeros(n_t)
    base_r = base_l = 0.0
    for k, piece in enumerate(pieces):
        i0, i1 = knots[k], knots[k + 1]
        a_r[i0 : i1 + 1] = base_r + piece.a_r
        a_l[i0 : i1 + 1] = base_l + piece.a_l
        base_r, base_l = a_r[i1], a_l[i1]
    a = a_r - a_l
    y = Y - (a[-1] - a)[:, None]
    sol = MRSolution(
        grid,
        band,
        gen,
        loss,
        y,
        z,
        a_r,
        a_l,
        mean_y,
        lower,
        upper,
        [p.components[0] for p in pieces],
        [p.reflections[0] for p in pieces],
        [p.constraints[0] for p in pieces],
        knots,
        [p.iterations[0] for p in pieces],
        [p.gap_history[0] for p in pieces],
    )
    return sol


@dataclass
class ThetaDiagnostics:
    """Records of the truncation/theta pipeline (diagnostic only)."""

    m_levels: list[float] = field(default_factory=list)
    thetas: list[float] = field(default_factory=list)
    cauchy_gaps: list[float] = field(default_factory=list)
    grid_gaps: list[float] = field(default_factory=list)
    a_gaps: list[float] = field(default_factory=list)
    entries: list[dict] = field(default_factory=list)
    step: float | None = None
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "m_levels": self.m_levels,
            "thetas": self.thetas,
            "cauchy_gaps": self.cauchy_gaps,
            "grid_gaps": self.grid_gaps,
            "a_gaps": self.a_gaps,
            "entries": self.entries,
            "step": self.step,
            "converged": self.converged,
        }


def _theta_pair(x1: np.ndarray, x2: np.ndarray, theta: float, convexity: str) -> tuple[np.ndarray, np.ndarray]:
    if convexity == "convex":
        return (x1 - theta * x2) / (1.0 - theta), (x2 - theta * x1) / (1.0 - theta)
    return (theta * x1 - x2) / (1.0 - theta), (theta * x2 - x1) / (1.0 - theta)


def theta_distance(sol_m: MRSolution, sol_mq: MRSolution, theta: float) -> dict:
    """Sup-norms of the theta-scaled differences of Y, y and A between two solutions.

    Convex generators use (X1 - theta X2) / (1 - theta), concave ones
    (theta X1 - X2) / (1 - theta); both orderings are recorded.
    """
    if not 0.0 <= theta < 1.0:
        raise ValueError("theta must lie in [0, 1)")
    if not sol_m.grid.same_mesh(sol_mq.grid):
        raise GridMismatch("theta distance needs solutions on the same grid")
    conv = sol_m.gen.convexity
    out = {"theta": theta}
    for name, x1, x2 in (("Y", sol_m.Y, sol_mq.Y), ("y", sol_m.y, sol_mq.y), ("A", sol_m.a, sol_mq.a)):
        d12, d21 = _theta_pair(x1, x2, theta, conv)
        out[f"sup_delta_{name}"] = float(np.max(np.abs(d12)))
        out[f"sup_delta_{name}_swapped"] = float(np.max(np.abs(d21)))
    return out


def engine_gap(sol1: MRSolution, sol2: MRSolution) -> float:
    """sup_t E[|Y1_t - Y2_t|] with the engine supplying each expectation."""
    grid = sol1.grid
    diff = np.abs(sol1.Y - sol2.Y)
    return float(np.max(expectations_at_origin(diff, np.arange(grid.n_time + 1), sol1.band, grid)))


def unbounded_step(loss: LossSpec, gen: GeneratorSpec, band: VolatilityBand, horizon: float) -> float:
    """h = min(delta, 0.9 sigma_tilde^2 / ((128 + 768 C/c) L1 sigma_hat^2))."""
    delta = default_delta(loss, gen, band, horizon)
    if gen.L1 == 0.0:
        return delta
    bound = 0.9 * band.tilde_sq / ((128.0 + 768.0 * loss.C / loss.c) * gen.L1 * band.hat_sq)
    return min(delta, bound)


def solve_unbounded(
    terminal: Payoff,
    gen: GeneratorSpec,
    loss: LossSpec,
    band: VolatilityBand,
    grid: GridSpec,
    m_schedule: Sequence[float] = (1, 2, 4, 8, 16),
    theta_schedule: Sequence[float] = (0.5, 0.9, 0.99),
    init: str | np.ndarray = "unreflected",
    gap_tol: float = 5e-3,
    **bounded_kwargs,
) -> tuple[MRSolution, ThetaDiagnostics]:
    """Truncate at each level m, solve the bounded problem, and monitor the Cauchy gaps.

    The gap between consecutive levels is sup_t E[|Y^(m') - Y^(m)|]. Three
    consecutive non-decreasing gaps raise ConvergenceFailure (with the
    diagnostics attached as ``exc.diagnostics``).
    """
    band.tilde_sq  # undefined for sigma_low = 0
    if len(m_schedule) < 1 or any(m <= 0 for m in m_schedule) or list(m_schedule) != sorted(m_schedule):
        raise ValueError("m_schedule must be increasing positive levels")
    h = unbounded_step(loss, gen, band, grid.horizon)
    diag = ThetaDiagnostics(m_levels=[float(m) for m in m_schedule], thetas=[float(t) for t in theta_schedule], step=h)
    prev: MRSolution | None = None
    prev_m = 0.0
    flat = 0
    for m in m_schedule:
        gen_m, term_m = truncate(gen, terminal, m)
        sol = solve_bounded(term_m, gen_m, loss, band, grid, delta=h, init=init, **bounded_kwargs)
        if prev is not None:
            gap = engine_gap(prev, sol)
            diag.cauchy_gaps.append(gap)
            diag.grid_gaps.append(float(np.max(np.abs(prev.Y - sol.Y))))
            diag.a_gaps.append(float(np.max(np.abs(prev.a - sol.a))))
            for theta in theta_schedule:
                entry = theta_distance(sol, prev, theta)
                entry["m"] = float(prev_m)
                entry["q"] = float(m - prev_m)
                diag.entries.append(entry)
            gaps = diag.cauchy_gaps
            if len(gaps) > 1 and gaps[-2] > ROUNDING_FLOOR:
                flat = flat + 1 if gaps[-1] >= gaps[-2] else 0
                if flat >= 3:
                    exc = ConvergenceFailure(f"Cauchy gaps stopped decreasing: {gaps}")
                    exc.diagnostics = diag
                    raise exc
        prev, prev_m = sol, m
    diag.converged = not diag.cauchy_gaps or diag.cauchy_gaps[-1] <= gap_tol
    return prev, diag


def verify_solution(
    sol: MRSolution,
    tree_depth: int = 8,
    tolerances: dict | None = None,
) -> dict:
    """Certificate report: constraints, flatness, K-martingale residual, A monotonicity.

    Constraint expectations are recomputed with the engine directly from Y,
    independently of the tabulated constraint functions. Flatness pairs the
    constraint value at t_i with A_{t_{i+1}} - A_{t_i}.
    """
    tol = dict(CERTIFICATE_TOLERANCES)
    tol.update(tolerances or {})
    grid, band, loss = sol.grid, sol.band, sol.loss
    times = grid.times
    idx = np.arange(grid.n_time + 1)
    Y = sol.Y
    e_l = expectations_at_origin(sol.loss.L(times[:, None], Y), idx, band, grid)
    e_r = expectations_at_origin(sol.loss.R(times[:, None], Y), idx, band, grid)
    d_ar = np.diff(sol.a_r)
    d_al = np.diff(sol.a_l)
    flat_r = float(np.sum(np.abs(e_r[:-1]) * d_ar))
    flat_l = float(np.sum(np.abs(e_l[:-1]) * d_al))
    tv = float(sol.a_r[-1] + sol.a_l[-1])
    k_res = max((c.k_martingale_residual(tree_depth)["max_residual"] for c in sol.components), default=0.0)
    k_inc = max((c.k_increase / max(1.0, float(np.max(np.abs(c.values)))) for c in sol.components), default=0.0)
    a = sol.a
    representation = float(np.max(np.abs(Y - sol.y - (a[-1] - a)[:, None])))
    report = {
        "constraint_margin_L": float(np.max(np.maximum(e_l, 0.0))),
        "constraint_margin_R": float(np.max(np.maximum(-e_r, 0.0))),
        "flatness_R": flat_r,
        "flatness_L": flat_l,
        "total_variation_A": tv,
        "k_martingale_residual": k_res,
        "k_increase_relative": k_inc,
        "min_increment_A_R": float(d_ar.min()) if len(d_ar) else 0.0,
        "min_increment_A_L": float(d_al.min()) if len(d_al) else 0.0,
        "simultaneous_increase": bool(np.any((d_ar > 0) & (d_al > 0))),
        "representation_residual": representation,
        "tree_depth": tree_depth,
        "tolerances": tol,
    }
    flat_bound = tol["flatness_relative"] * tv
    checks = {
        "constraints": max(report["constraint_margin_L"], report["constraint_margin_R"]) <= tol["constraint"],
        "flatness": flat_r <= flat_bound + 1e-15 and flat_l <= flat_bound + 1e-15,
        "k_martingale": k_res <= tol["k_martingale"],
        "k_monotone": k_inc <= tol["k_increase"],
        "a_monotone": min(report["min_increment_A_R"], report["min_increment_A_L"]) >= -tol["monotonicity"]
        and not report["simultaneous_increase"],
    }
    report["checks"] = checks
    report["passed"] = all(checks.values())
    return report
