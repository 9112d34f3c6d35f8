"""Sublinear expectation engine.

Conditional G-expectations of Markovian payoffs are computed by solving the
G-heat equation

    du/dt + G(d2u/dx2) = 0,    u(T, x) = phi(x),
    G(a) = (sigma_high^2 a^+ - sigma_low^2 a^-) / 2,

backward in time with an explicit monotone finite-difference scheme. An
independent oracle, :func:`scenario_supremum_oracle`, takes the supremum of
linear expectations over all adapted two-point volatility controls on a
recombining binomial tree.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import BudgetExceeded, CFLViolation, ConfigError, NumericalBreakdown, UndefinedConstant

GROWTH_TAGS = ("bounded", "linear", "exponential")
MAX_TREE_STEPS = 16
CFL_LIMIT = 0.5


@dataclass(frozen=True)
class VolatilityBand:
    """Ambiguity interval [sigma_low^2, sigma_high^2] for the variance per unit time."""

    sigma_low_sq: float
    sigma_high_sq: float

    def __post_init__(self):
        lo, hi = self.sigma_low_sq, self.sigma_high_sq
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("volatility band must be finite")
        if not 0.0 <= lo < hi:
            raise ValueError(f"need 0 <= sigma_low_sq < sigma_high_sq, got [{lo}, {hi}]")

    @property
    def sigma_low(self) -> float:
        return math.sqrt(self.sigma_low_sq)

    @property
    def sigma_high(self) -> float:
        return math.sqrt(self.sigma_high_sq)

    @property
    def tilde_sq(self) -> float:
        """(sigma_high / sigma_low)^2; undefined for a degenerate lower volatility."""
        if self.sigma_low_sq == 0.0:
            raise UndefinedConstant("sigma_tilde^2 is undefined when sigma_low_sq = 0")
        return self.sigma_high_sq / self.sigma_low_sq

    @property
    def hat_sq(self) -> float:
        """sigma_tilde^2 * max(sigma_high^2, 1)."""
        return self.tilde_sq * max(self.sigma_high_sq, 1.0)

    def g(self, a):
        """Vectorized G(a); see :func:`g_eval` for the scalar, checked version."""
        a = np.asarray(a, dtype=float)
        return 0.5 * (self.sigma_high_sq * np.maximum(a, 0.0) - self.sigma_low_sq * np.maximum(-a, 0.0))

    def to_dict(self) -> dict:
        return {"sigma_low_sq": self.sigma_low_sq, "sigma_high_sq": self.sigma_high_sq}


def g_eval(a: float, band: VolatilityBand) -> float:
    """G(a) = (sigma_high^2 a^+ - sigma_low^2 a^-) / 2 for a finite scalar ``a``."""
    a = float(a)
    if not math.isfinite(a):
        raise ValueError(f"G is only defined for finite arguments, got {a}")
    if a >= 0.0:
        return 0.5 * band.sigma_high_sq * a
    return -0.5 * band.sigma_low_sq * (-a)


@dataclass(frozen=True)
class GridSpec:
    """Uniform time/space grid. Use :meth:`for_band` to get a CFL-valid grid."""

    t_start: float
    t_end: float
    n_time: int
    x_min: float
    x_max: float
    n_space: int

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("t_start must be < t_end")
        if self.n_time < 1:
            raise ValueError("n_time must be >= 1")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be < x_max")
        if self.n_space < 3:
            raise ValueError("n_space must be >= 3")

    @classmethod
    def for_band(
        cls,
        band: VolatilityBand,
        t_end: float = 1.0,
        n_space: int = 201,
        n_time: int | None = None,
        t_start: float = 0.0,
        half_width: float | None = None,
    ) -> "GridSpec":
        """Symmetric grid around 0 of half width 6 sigma_high sqrt(T) by default.

        When ``n_time`` is omitted the smallest CFL-valid step count is used.
        The CFL condition is checked either way.
        """
        horizon = t_end - t_start
        if half_width is None:
            half_width = 6.0 * band.sigma_high * math.sqrt(horizon)
        dx = 2.0 * half_width / (n_space - 1)
        if n_time is None:
            n_time = max(1, math.ceil(band.sigma_high_sq * horizon / (CFL_LIMIT * dx * dx) - 1e-9))
        grid = cls(t_start, t_end, int(n_time), -half_width, half_width, int(n_space))
        grid.check_cfl(band)
        return grid

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_time

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_space - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_time + 1)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_space)

    @property
    def horizon(self) -> float:
        return self.t_end - self.t_start

    def cfl_ratio(self, band: VolatilityBand) -> float:
        return band.sigma_high_sq * self.dt / self.dx**2

    def check_cfl(self, band: VolatilityBand) -> None:
        ratio = self.cfl_ratio(band)
        if ratio > CFL_LIMIT * (1.0 + 1e-12):
            raise CFLViolation(
                f"CFL ratio sigma_high^2 dt / dx^2 = {ratio:.4g} exceeds {CFL_LIMIT} "
                f"(n_time={self.n_time}, n_space={self.n_space})"
            )

    def time_index(self, t: float) -> int:
        """Index of grid time ``t``; ``t`` must be a grid time up to rounding."""
        pos = (t - self.t_start) / self.dt
        idx = int(round(pos))
        if abs(pos - idx) > 1e-7 or not 0 <= idx <= self.n_time:
            raise ValueError(f"t={t} is not a grid time")
        return idx

    def window(self, i0: int, i1: int) -> "GridSpec":
        """Sub-grid covering time indices i0..i1 (same spatial mesh)."""
        if not 0 <= i0 < i1 <= self.n_time:
            raise ValueError(f"bad window [{i0}, {i1}] for n_time={self.n_time}")
        times = self.times
        return GridSpec(float(times[i0]), float(times[i1]), i1 - i0, self.x_min, self.x_max, self.n_space)

    def same_mesh(self, other: "GridSpec") -> bool:
        return (
            self.n_time == other.n_time
            and self.n_space == other.n_space
            and np.isclose(self.t_start, other.t_start)
            and np.isclose(self.t_end, other.t_end)
            and np.isclose(self.x_min, other.x_min)
            and np.isclose(self.x_max, other.x_max)
        )

    def to_dict(self) -> dict:
        return {
            "t_start": self.t_start,
            "t_end": self.t_end,
            "n_time": self.n_time,
            "x_min": self.x_min,
            "x_max": self.x_max,
            "n_space": self.n_space,
        }


def _piecewise_linear(knots):
    pts = np.asarray(knots, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 1:
        raise ValueError("knots must be a list of (x, value) pairs")
    if len(pts) > 1 and np.any(np.diff(pts[:, 0]) <= 0):
        raise ValueError("knot abscissae must be strictly increasing")
    xs, vs = pts[:, 0], pts[:, 1]
    if len(pts) == 1:
        return lambda x: np.full_like(np.asarray(x, dtype=float), vs[0])
    return lambda x: np.interp(np.asarray(x, dtype=float), xs, vs)


@dataclass(frozen=True)
class Payoff:
    """A terminal function phi(x) with a declared growth class.

    Build instances with the named constructors; ``params`` records how the
    payoff was made so it can be written back to a config file.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    growth_tag: str = "linear"
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.growth_tag not in GROWTH_TAGS:
            raise ValueError(f"growth_tag must be one of {GROWTH_TAGS}")

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(x, dtype=float)), dtype=float)

    def sample(self, grid: GridSpec) -> np.ndarray:
        values = self(grid.xs)
        if values.shape != (grid.n_space,) or not np.all(np.isfinite(values)):
            raise ValueError(f"payoff {self.family} is not finite on [{grid.x_min}, {grid.x_max}]")
        return values

    @classmethod
    def constant(cls, c: float) -> "Payoff":
        return cls(lambda x: np.full_like(x, float(c)), "bounded", "constant", {"value": c})

    @classmethod
    def linear(cls, slope: float = 1.0, intercept: float = 0.0) -> "Payoff":
        tag = "bounded" if slope == 0 else "linear"
        return cls(lambda x: slope * x + intercept, tag, "linear", {"slope": slope, "intercept": intercept})

    @classmethod
    def quadratic(cls, a: float = 1.0, b: float = 0.0, c: float = 0.0) -> "Payoff":
        return cls(lambda x: a * x * x + b * x + c, "exponential", "quadratic", {"a": a, "b": b, "c": c})

    @classmethod
    def call(cls, strike: float = 0.0, notional: float = 1.0) -> "Payoff":
        return cls(
            lambda x: notional * np.maximum(x - strike, 0.0),
            "linear",
            "call",
            {"strike": strike, "notional": notional},
        )

    @classmethod
    def put(cls, strike: float = 0.0, notional: float = 1.0) -> "Payoff":
        return cls(
            lambda x: notional * np.maximum(strike - x, 0.0),
            "linear",
            "put",
            {"strike": strike, "notional": notional},
        )

    @classmethod
    def exp(cls, rate: float = 1.0, scale: float = 1.0) -> "Payoff":
        return cls(lambda x: scale * np.exp(rate * x), "exponential", "exp", {"rate": rate, "scale": scale})

    @classmethod
    def tanh(cls, amplitude: float = 1.0, rate: float = 1.0, shift: float = 0.0) -> "Payoff":
        return cls(
            lambda x: amplitude * np.tanh(rate * x) + shift,
            "bounded",
            "tanh",
            {"amplitude": amplitude, "rate": rate, "shift": shift},
        )

    @classmethod
    def piecewise_linear(cls, knots) -> "Payoff":
        """Linear interpolation through ``knots``, constant beyond the end knots."""
        return cls(_piecewise_linear(knots), "bounded", "piecewise_linear", {"knots": [list(k) for k in knots]})

    @classmethod
    def from_config(cls, spec: dict) -> "Payoff":
        if not isinstance(spec, dict) or "family" not in spec:
            raise ConfigError("payoff needs a 'family' key")
        family = spec["family"]
        params = {k: v for k, v in spec.items() if k != "family"}
        makers = {
            "constant": cls.constant,
            "linear": cls.linear,
            "quadratic": cls.quadratic,
            "call": cls.call,
            "put": cls.put,
            "exp": cls.exp,
            "tanh": cls.tanh,
            "piecewise_linear": cls.piecewise_linear,
        }
        if family not in makers:
            raise ConfigError(f"unknown payoff family {family!r}; choose from {sorted(makers)}")
        try:
            return makers[family](**params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for payoff family {family!r}: {exc}") from None

    def to_config(self) -> dict:
        return {"family": self.family, **self.params}


@dataclass(frozen=True, eq=False)
class FieldSolution:
    """Grid values u[time index, space index] of a backward solve."""

    grid: GridSpec
    values: np.ndarray
    band: VolatilityBand

    def __post_init__(self):
        expected = (self.grid.n_time + 1, self.grid.n_space)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalBreakdown("field contains non-finite values")
        self.values.setflags(write=False)

    def slice(self, i: int) -> np.ndarray:
        return self.values[i]

    def value(self, i: int, x) -> np.ndarray | float:
        """Linear interpolation of time slice ``i`` at ``x``."""
        out = np.interp(x, self.grid.xs, self.values[i])
        return float(out) if np.ndim(out) == 0 else out

    def at(self, t: float, x) -> np.ndarray | float:
        return self.value(self.grid.time_index(t), x)

    @property
    def root_value(self) -> float:
        return float(self.value(0, 0.0))

    def to_csv(self, path, columns=("t", "x", "u")) -> None:
        write_field_csv(path, self.grid, {columns[2]: self.values}, columns[:2])


def write_field_csv(path, grid: GridSpec, fields: dict[str, np.ndarray], index_columns=("t", "x")) -> None:
    """Long-format CSV with full round-trip precision."""
    times, xs = grid.times, grid.xs
    names = list(fields)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*index_columns, *names])
        for i, t in enumerate(times):
            for j, x in enumerate(xs):
                writer.writerow([repr(float(t)), repr(float(x)), *(repr(float(fields[n][i, j])) for n in names)])


def heat_step(u: np.ndarray, dt: float, dx: float, band: VolatilityBand) -> np.ndarray:
    """One explicit backward step of du/dt + G(u_xx) = 0 on the last axis.

    Boundary nodes carry zero curvature, i.e. they keep the linear extension
    of the terminal data frozen.
    """
    out = u.copy()
    d2 = (u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]) / (dx * dx)
    out[..., 1:-1] += dt * band.g(d2)
    return out


def solve_g_heat(payoff: Payoff, band: VolatilityBand, grid: GridSpec) -> FieldSolution:
    """Solve the G-heat equation backward from ``payoff`` at ``grid.t_end``.

    ``values[i, j]`` approximates E_t[phi(B_T)] at t = times[i], B_t = xs[j].
    """
    grid.check_cfl(band)
    values = np.empty((grid.n_time + 1, grid.n_space))
    values[-1] = payoff.sample(grid)
    dt, dx = grid.dt, grid.dx
    for n in range(grid.n_time - 1, -1, -1):
        values[n] = heat_step(values[n + 1], dt, dx, band)
        if not np.all(np.isfinite(values[n])):
            raise NumericalBreakdown("G-heat sweep produced non-finite values", step=n)
    return FieldSolution(grid, values, band)


def g_expectation(payoff: Payoff, band: VolatilityBand, grid: GridSpec) -> float:
    """E[phi(B_T)] read from the solved field at (t_start, x = 0)."""
    return solve_g_heat(payoff, band, grid).root_value


def expectations_at_origin(
    slices: np.ndarray, start_index: np.ndarray, band: VolatilityBand, grid: GridSpec
) -> np.ndarray:
    """Batched unconditional G-expectations E[phi_r(B_{t_r})].

    ``slices[r]`` holds phi_r sampled on ``grid.xs`` and ``start_index[r]`` is
    the grid index of t_r. Every row is swept back to ``grid.t_start`` and
    read at x = 0. Rows are processed together so that all times share one
    backward sweep.
    """
    grid.check_cfl(band)
    slices = np.asarray(slices, dtype=float)
    start_index = np.asarray(start_index, dtype=int)
    if slices.ndim != 2 or slices.shape[1] != grid.n_space or len(start_index) != len(slices):
        raise ValueError("slices must have shape (rows, n_space) matching start_index")
    if len(slices) == 0:
        return np.empty(0)
    if start_index.min() < 0 or start_index.max() > grid.n_time:
        raise ValueError("start_index out of grid range")
    order = np.argsort(-start_index, kind="stable")
    work = slices[order].copy()
    starts = start_index[order]
    dt, dx = grid.dt, grid.dx
    active = 0
    for n in range(int(starts[0]), 0, -1):
        while active < len(starts) and starts[active] >= n:
            active += 1
        work[:active] = heat_step(work[:active], dt, dx, band)
    if not np.all(np.isfinite(work)):
        raise NumericalBreakdown("batched G-expectation produced non-finite values")
    xs = grid.xs
    values = np.array([np.interp(0.0, xs, row) for row in work])
    out = np.empty_like(values)
    out[order] = values
    return out


class VolatilityTree:
    """Recombining binomial tree driven by a two-point volatility control.

    Each step moves B by +-sigma sqrt(dt) with probability 1/2, where sigma is
    chosen from {sigma_low, sigma_high} adaptively. Node (a, b) carries the
    state x = a sigma_low sqrt(dt) + b sigma_high sqrt(dt); a low step moves a
    by one, a high step moves b by one. Value functions are arrays indexed
    [a + n, b + n].
    """

    def __init__(self, band: VolatilityBand, horizon: float, n_steps: int):
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if n_steps > MAX_TREE_STEPS:
            raise BudgetExceeded(f"tree depth {n_steps} exceeds the enumeration guard {MAX_TREE_STEPS}")
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        self.band = band
        self.horizon = float(horizon)
        self.n_steps = int(n_steps)
        self.dt = self.horizon / self.n_steps
        self.h_low = band.sigma_low * math.sqrt(self.dt)
        self.h_high = band.sigma_high * math.sqrt(self.dt)
        n = self.n_steps
        idx = np.arange(-n, n + 1)
        self.a, self.b = np.meshgrid(idx, idx, indexing="ij")
        self.x = self.a * self.h_low + self.b * self.h_high

    @property
    def controls(self) -> tuple[float, float]:
        """Variances of the low and high control."""
        return self.band.sigma_low_sq, self.band.sigma_high_sq

    def reachable(self, k: int) -> np.ndarray:
        """Mask of nodes reachable after k steps."""
        mask = np.zeros(self.a.shape, dtype=bool)
        abs_a, abs_b = np.abs(self.a), np.abs(self.b)
        for j in range(k + 1):
            mask |= (abs_a <= j) & ((self.a - j) % 2 == 0) & (abs_b <= k - j) & ((self.b - (k - j)) % 2 == 0)
        return mask

    @staticmethod
    def _shift(v: np.ndarray, axis: int, step: int) -> np.ndarray:
        # v evaluated at index + step along axis, edge-padded (edges are never reachable
        # from interior levels).
        padded = np.pad(v, [(1, 1) if ax == axis else (0, 0) for ax in range(v.ndim)], mode="edge")
        sl = [slice(None)] * v.ndim
        sl[axis] = slice(1 + step, 1 + step + v.shape[axis])
        return padded[tuple(sl)]

    def neighbours(self, v: np.ndarray):
        """(low up, low down, high up, high down) views of next-level values."""
        return (self._shift(v, 0, 1), self._shift(v, 0, -1), self._shift(v, 1, 1), self._shift(v, 1, -1))

    def step_x(self, sign: int, high: bool) -> np.ndarray:
        return self.x + sign * (self.h_high if high else self.h_low)

    def sup_expectation(self, payoff: Callable[[np.ndarray], np.ndarray]) -> float:
        """sup over adapted controls of E[payoff(B_T)]."""
        v = np.asarray(payoff(self.x), dtype=float)
        for _ in range(self.n_steps):
            lu, ld, hu, hd = self.neighbours(v)
            v = np.maximum(0.5 * (lu + ld), 0.5 * (hu + hd))
        n = self.n_steps
        return float(v[n, n])


def scenario_supremum_oracle(
    payoff: Callable[[np.ndarray], np.ndarray],
    band: VolatilityBand,
    n_steps: int,
    horizon: float = 1.0,
) -> float:
    """Discrete representation supremum over two-point volatility controls.

    Enumerates every adapted control sequence in {sigma_low, sigma_high}^n by
    dynamic programming on the recombining tree, so the result is the exact
    supremum for the binomial walk with n_steps increments of +-sigma sqrt(T/n).
    """
    return VolatilityTree(band, horizon, n_steps).sup_expectation(payoff)
