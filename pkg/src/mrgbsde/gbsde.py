"""Quadratic G-BSDEs with Markovian terminal data.

The solver marches the nonlinear Feynman-Kac equation

    du/dt + f(t, u, u_x) + 2 G(u_xx / 2 + g(t, u, u_x)) = 0

backward with the explicit nodewise step

    u(t) = u(t+dt) + dt f + 2 dt G(u_xx / 2 + g),

so that Y_t = u(t, B_t) and Z_t = u_x(t, B_t). The non-increasing
G-martingale K is not stored; it is rebuilt on demand from the recursion
residual along a scenario.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .engine import FieldSolution, GridSpec, Payoff, VolatilityBand, VolatilityTree, solve_g_heat, write_field_csv
from .errors import AssumptionViolation, ConfigError, SchemeFailure, StabilityGuardViolation

DEFAULT_STABILITY_GUARD = 0.25
K_TOLERANCE = 1e-8


class StepFunction:
    """Right-continuous piecewise-constant function of time from (t, value) knots."""

    def __init__(self, knots: Sequence[Sequence[float]] | float = 0.0):
        if np.isscalar(knots):
            knots = [(0.0, float(knots))]
        pts = np.asarray(knots, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("need at least one knot")
        if np.any(np.diff(pts[:, 0]) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if not np.all(np.isfinite(pts)):
            raise ValueError("knots must be finite")
        self.knots = pts
        self.knots.setflags(write=False)

    def __call__(self, t):
        idx = np.searchsorted(self.knots[:, 0], t, side="right") - 1
        return self.knots[np.clip(idx, 0, len(self.knots) - 1), 1]

    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.knots[:, 1])))

    def clamp(self, m: float) -> "StepFunction":
        return StepFunction(np.column_stack([self.knots[:, 0], np.clip(self.knots[:, 1], -m, m)]))

    def to_list(self) -> list:
        return [[float(t), float(v)] for t, v in self.knots]

    def __eq__(self, other):
        return isinstance(other, StepFunction) and np.array_equal(self.knots, other.knots)

    def __hash__(self):
        return hash(self.knots.tobytes())

    def __repr__(self):
        return f"StepFunction({self.to_list()})"


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator pair (f, g) from the family

        f(t, y, z) = f0(t) + a_f y + b_f z + (gamma_f / 2) z^2,
        g(t, y, z) = g0(t) + a_g y + b_g z + (gamma_g / 2) z^2,

    with f integrated against dt and g against d<B>.
    """

    f0: StepFunction = field(default_factory=StepFunction)
    g0: StepFunction = field(default_factory=StepFunction)
    a_f: float = 0.0
    a_g: float = 0.0
    b_f: float = 0.0
    b_g: float = 0.0
    gamma_f: float = 0.0
    gamma_g: float = 0.0
    convexity: str = "convex"

    def __post_init__(self):
        for name in ("f0", "g0"):
            if not isinstance(getattr(self, name), StepFunction):
                object.__setattr__(self, name, StepFunction(getattr(self, name)))
        for name in ("a_f", "a_g", "b_f", "b_g", "gamma_f", "gamma_g"):
            if not math.isfinite(getattr(self, name)):
                raise AssumptionViolation(f"{name} must be finite", "generator coefficients")
        if self.convexity not in ("convex", "concave"):
            raise AssumptionViolation("convexity must be 'convex' or 'concave'", "convexity flag")
        gammas = (self.gamma_f, self.gamma_g)
        if self.convexity == "convex" and min(gammas) < 0:
            raise AssumptionViolation("convex flag needs gamma_f, gamma_g >= 0", "convexity in z")
        if self.convexity == "concave" and max(gammas) > 0:
            raise AssumptionViolation("concave flag needs gamma_f, gamma_g <= 0", "convexity in z")

    @property
    def L1(self) -> float:
        """Lipschitz constant in y of f + g."""
        return abs(self.a_f) + abs(self.a_g)

    @property
    def L2(self) -> float:
        """Constant of the local Lipschitz envelope L2 (1 + |z| + |z'|) |z - z'|."""
        return max(abs(self.b_f) + abs(self.b_g), 0.5 * (abs(self.gamma_f) + abs(self.gamma_g)))

    def alpha(self, t):
        """Intercept part of the growth bound."""
        return np.abs(self.f0(t)) + np.abs(self.g0(t))

    def M0(self, terminal_sup: float, horizon: float, t_start: float = 0.0) -> float:
        """int |f0|^2 dt + int |g0|^2 dt + sup |xi| over [t_start, t_start + horizon]."""
        ts = np.linspace(t_start, t_start + horizon, 2001)
        sq = self.f0(ts) ** 2 + self.g0(ts) ** 2
        return float(np.trapezoid(sq, ts)) + float(terminal_sup)

    def f(self, t, y, z):
        return self.f0(t) + self.a_f * y + self.b_f * z + 0.5 * self.gamma_f * z * z

    def g(self, t, y, z):
        return self.g0(t) + self.a_g * y + self.b_g * z + 0.5 * self.gamma_g * z * z

    def is_zero(self) -> bool:
        return self == GeneratorSpec(convexity=self.convexity)

    @classmethod
    def from_config(cls, spec: dict | None) -> "GeneratorSpec":
        spec = dict(spec or {})
        known = {"f0", "g0", "a_f", "a_g", "b_f", "b_g", "gamma_f", "gamma_g", "convexity"}
        unknown = set(spec) - known
        if unknown:
            raise ConfigError(f"unknown generator keys {sorted(unknown)}")
        kwargs = {k: float(v) for k, v in spec.items() if k not in ("f0", "g0", "convexity")}
        for key in ("f0", "g0"):
            if key in spec:
                kwargs[key] = StepFunction(spec[key])
        if "convexity" in spec:
            kwargs["convexity"] = spec["convexity"]
        return cls(**kwargs)

    def to_config(self) -> dict:
        return {
            "f0": self.f0.to_list(),
            "g0": self.g0.to_list(),
            "a_f": self.a_f,
            "a_g": self.a_g,
            "b_f": self.b_f,
            "b_g": self.b_g,
            "gamma_f": self.gamma_f,
            "gamma_g": self.gamma_g,
            "convexity": self.convexity,
        }


def spatial_derivatives(u: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """Centered first and second differences on the last axis.

    Boundary nodes use one-sided first differences and zero curvature.
    """
    z = np.empty_like(u)
    z[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * dx)
    z[..., 0] = (u[..., 1] - u[..., 0]) / dx
    z[..., -1] = (u[..., -1] - u[..., -2]) / dx
    d2 = np.zeros_like(u)
    d2[..., 1:-1] = (u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]) / (dx * dx)
    return z, d2


def _bilinear(values: np.ndarray, grid: GridSpec, t: float, x):
    pos = (t - grid.t_start) / grid.dt
    i0 = int(min(max(math.floor(pos + 1e-9), 0), grid.n_time - 1))
    w = min(max(pos - i0, 0.0), 1.0)
    xs = grid.xs
    lo = np.interp(x, xs, values[i0])
    if w == 0.0:
        return lo
    hi = np.interp(x, xs, values[i0 + 1])
    return (1.0 - w) * lo + w * hi


@dataclass(frozen=True, eq=False)
class GBSDESolution:
    """(Y, Z) on the grid plus what is needed to rebuild K along scenarios.

    ``frozen_y`` is the field substituted for the y argument of the generator
    (None means the solution itself is used).
    """

    y_field: FieldSolution
    z_field: np.ndarray
    generator: GeneratorSpec
    frozen_y: np.ndarray | None = None
    k_increase: float = 0.0
    guard_margin: float = math.inf

    @property
    def grid(self) -> GridSpec:
        return self.y_field.grid

    @property
    def band(self) -> VolatilityBand:
        return self.y_field.band

    @property
    def values(self) -> np.ndarray:
        return self.y_field.values

    @property
    def y0(self) -> float:
        return self.y_field.root_value

    def _y_argument(self, n: int) -> np.ndarray:
        return self.values[n] if self.frozen_y is None else self.frozen_y[n]

    def _compensator_parts(self, n: int):
        """Pieces of the one-step drift at slice n -> n+1 (explicit in n+1)."""
        grid = self.grid
        u = self.values[n + 1]
        _, d2 = spatial_derivatives(u, grid.dx)
        z = self.z_field[n + 1]
        t = grid.times[n]
        yarg = self._y_argument(n + 1)
        return u, d2, self.generator.f(t, yarg, z), self.generator.g(t, yarg, z)

    def k_increments(self, n: int, sigma_sq: float) -> np.ndarray:
        """dK at every node for a step n -> n+1 taken with variance sigma_sq.

        This is E^sigma[Y_{n+1}] - Y_n + dt f + sigma^2 dt g for the lattice
        chain underlying the scheme; it is <= 0 for sigma^2 in the band and
        vanishes for the maximizing control.
        """
        u, d2, fv, gv = self._compensator_parts(n)
        dt = self.grid.dt
        return u + 0.5 * sigma_sq * dt * d2 + dt * fv + sigma_sq * dt * gv - self.values[n]

    def k_path(self, controls: Sequence[int], moves: Sequence[int] | None = None, start: int | None = None) -> np.ndarray:
        """K along a lattice scenario.

        ``controls[n]`` is 0 (sigma_low) or 1 (sigma_high) for step n and
        ``moves[n]`` in {-1, 0, 1} is the lattice move. The scenario starts
        at the node nearest x = 0 unless ``start`` is given.
        """
        grid = self.grid
        if len(controls) != grid.n_time:
            raise ValueError(f"need {grid.n_time} controls, got {len(controls)}")
        moves = np.zeros(grid.n_time, dtype=int) if moves is None else np.asarray(moves, dtype=int)
        i = int(np.argmin(np.abs(grid.xs))) if start is None else int(start)
        variances = (self.band.sigma_low_sq, self.band.sigma_high_sq)
        k = np.zeros(grid.n_time + 1)
        for n in range(grid.n_time):
            k[n + 1] = k[n] + self.k_increments(n, variances[int(controls[n])])[i]
            i = int(min(max(i + moves[n], 0), grid.n_space - 1))
        return k

    def k_martingale_residual(self, depth: int = 8, method: str = "grid") -> dict:
        """Estimate of max |E_s[K_t] - K_s| over coarse times s < t.

        The supremum runs over adapted controls that are constant on each of
        ``depth`` coarse steps (a binary control tree). With ``method="grid"``
        the conditional expectation under a fixed control is the linear
        version of the solver step on the fine grid, so the generator integral
        is accumulated exactly as in the scheme. ``method="binomial"`` uses
        the +-sigma sqrt(dt) volatility tree with fields read by
        interpolation; it carries an extra O(dt^2) error per coarse step.
        Grids with fewer than ``depth`` time steps always use the binomial
        tree, since the grid version would be exact by construction there.
        """
        if method not in ("grid", "binomial"):
            raise ValueError(f"unknown method {method!r}")
        if depth < 1:
            raise ValueError("depth must be positive")
        grid, band = self.grid, self.band
        if method == "binomial" or grid.n_time < depth:
            return self._k_residual_binomial(depth)
        coarse = [round(k * grid.n_time / depth) for k in range(depth + 1)]
        dt, dx = grid.dt, grid.dx
        # source terms f and g of each fine step, as used by the scheme
        sources = []
        for n in range(grid.n_time):
            _, _, fv, gv = self._compensator_parts(n)
            sources.append((fv, gv))
        worst = 0.0
        worst_pair = (0, 0)
        for t_idx in range(1, depth + 1):
            v_next = np.array(self.values[coarse[t_idx]])
            for k in range(t_idx - 1, -1, -1):
                best = None
                for sigma_sq in (band.sigma_low_sq, band.sigma_high_sq):
                    v = v_next
                    for n in range(coarse[k + 1] - 1, coarse[k] - 1, -1):
                        _, d2 = spatial_derivatives(v, dx)
                        fv, gv = sources[n]
                        v = v + dt * (0.5 * sigma_sq * d2 + fv + sigma_sq * gv)
                    best = v if best is None else np.maximum(best, v)
                v_next = best
                val = float(np.max(np.abs(best - self.values[coarse[k]])))
                if val > worst:
                    worst, worst_pair = val, (k, t_idx)
        return {"depth": depth, "method": "grid", "max_residual": worst, "worst_pair": list(worst_pair)}

    def _k_residual_binomial(self, depth: int) -> dict:
        grid, band, gen = self.grid, self.band, self.generator
        tree = VolatilityTree(band, grid.horizon, depth)
        coarse = grid.t_start + tree.dt * np.arange(depth + 1)
        x = tree.x
        y_at = [_bilinear(self.values, grid, t, x) for t in coarse]
        z_at = [_bilinear(self.z_field, grid, t, x) for t in coarse]
        yarg_at = y_at if self.frozen_y is None else [_bilinear(self.frozen_y, grid, t, x) for t in coarse]
        drift = []
        for k in range(depth):
            per_control = []
            for sigma_sq, h in ((band.sigma_low_sq, tree.h_low), (band.sigma_high_sq, tree.h_high)):
                y_next = 0.5 * (
                    _bilinear(self.values, grid, coarse[k + 1], x + h) + _bilinear(self.values, grid, coarse[k + 1], x - h)
                )
                fv = gen.f(coarse[k], yarg_at[k], z_at[k])
                gv = gen.g(coarse[k], yarg_at[k], z_at[k])
                per_control.append(y_next - y_at[k] + tree.dt * fv + sigma_sq * tree.dt * gv)
            drift.append(per_control)
        masks = [tree.reachable(k) for k in range(depth + 1)]
        worst = 0.0
        worst_pair = (0, 0)
        for t_idx in range(1, depth + 1):
            w = np.zeros_like(x)
            for k in range(t_idx - 1, -1, -1):
                lu, ld, hu, hd = tree.neighbours(w)
                w = np.maximum(drift[k][0] + 0.5 * (lu + ld), drift[k][1] + 0.5 * (hu + hd))
                val = float(np.max(np.abs(w[masks[k]])))
                if val > worst:
                    worst, worst_pair = val, (k, t_idx)
        return {"depth": depth, "method": "binomial", "max_residual": worst, "worst_pair": list(worst_pair)}

    def diagnostics(self) -> dict:
        return {
            "y0": self.y0,
            "k_increase_residual": self.k_increase,
            "stability_guard_margin": self.guard_margin,
            "L1": self.generator.L1,
            "L2": self.generator.L2,
        }

    def to_csv(self, path) -> None:
        write_field_csv(path, self.grid, {"y": self.values, "z": self.z_field})

    def write_diagnostics(self, path, depth: int = 8) -> None:
        report = self.diagnostics()
        report["k_martingale"] = self.k_martingale_residual(depth)
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")


def solve_gbsde(
    terminal: Payoff | np.ndarray,
    gen: GeneratorSpec,
    band: VolatilityBand,
    grid: GridSpec,
    frozen_y: np.ndarray | None = None,
    stability_guard: float = DEFAULT_STABILITY_GUARD,
    k_tol: float = K_TOLERANCE,
) -> GBSDESolution:
    """Backward dynamic programming for Y_t = xi + int f dt + int g d<B> - int Z dB - (K_T - K_t).

    ``terminal`` is a payoff or a sampled terminal slice. With ``frozen_y``
    (shape (n_time + 1, n_space)) the generator's y argument is read from that
    field instead of the solution, which is how the mean-reflected fixed point
    freezes its first argument.
    """
    grid.check_cfl(band)
    if isinstance(terminal, Payoff):
        last = terminal.sample(grid)
    else:
        last = np.array(terminal, dtype=float)
        if last.shape != (grid.n_space,) or not np.all(np.isfinite(last)):
            raise ValueError("terminal slice must be finite with shape (n_space,)")
    shape = (grid.n_time + 1, grid.n_space)
    if frozen_y is not None and np.shape(frozen_y) != shape:
        raise ValueError(f"frozen_y must have shape {shape}")
    values = np.empty(shape)
    zs = np.empty(shape)
    values[-1] = last
    dt, dx = grid.dt, grid.dx
    L2 = gen.L2
    times = grid.times
    lo, hi = band.sigma_low_sq, band.sigma_high_sq
    worst_guard = 0.0
    k_increase = -math.inf
    for n in range(grid.n_time - 1, -1, -1):
        u = values[n + 1]
        z, d2 = spatial_derivatives(u, dx)
        zs[n + 1] = z
        guard = dt * L2 * (1.0 + 2.0 * float(np.max(np.abs(z))))
        worst_guard = max(worst_guard, guard)
        if guard > stability_guard:
            raise StabilityGuardViolation(
                f"dt L2 (1 + 2 max|Z|) = {guard:.4g} exceeds {stability_guard} at step {n}; refine the time grid"
            )
        yarg = u if frozen_y is None else frozen_y[n + 1]
        fv = gen.f(times[n], yarg, z)
        gv = gen.g(times[n], yarg, z)
        eta = 0.5 * d2 + gv
        values[n] = u + dt * fv + dt * (hi * np.maximum(eta, 0.0) - lo * np.maximum(-eta, 0.0))
        if not np.all(np.isfinite(values[n])):
            raise SchemeFailure(f"G-BSDE sweep produced non-finite values at step {n}")
        base = u + dt * fv - values[n]
        for sigma_sq in (lo, hi):
            k_increase = max(k_increase, float(np.max(base + sigma_sq * dt * eta)))
    zs[0] = spatial_derivatives(values[0], dx)[0]
    scale = max(1.0, float(np.max(np.abs(values))))
    if k_increase > k_tol * scale:
        raise SchemeFailure(f"recovered K increases by {k_increase:.3g} (tolerance {k_tol * scale:.3g})")
    zs.setflags(write=False)
    frozen = None if frozen_y is None else np.array(frozen_y, dtype=float)
    return GBSDESolution(
        FieldSolution(grid, values, band),
        zs,
        gen,
        frozen,
        k_increase=max(k_increase, 0.0),
        guard_margin=stability_guard - worst_guard,
    )


def _payoff_sup(payoff: Payoff) -> float | None:
    p = payoff.params
    if payoff.family == "constant":
        return abs(p["value"])
    if payoff.family == "tanh":
        return abs(p["amplitude"]) + abs(p["shift"])
    if payoff.family == "piecewise_linear":
        return max(abs(v) for _, v in p["knots"])
    if payoff.family == "linear" and p["slope"] == 0:
        return abs(p["intercept"])
    if payoff.family == "truncated":
        return p["m"]
    return None


def truncate(gen: GeneratorSpec, terminal: Payoff, m: float) -> tuple[GeneratorSpec, Payoff]:
    """Two-sided truncation at level m of the terminal value and of the generator intercepts.

    xi^(m) = (xi ^ m) v (-m); g^(m) = g - g0 + g0^(m), and likewise for f.
    Inputs already bounded by m are returned as the same objects.
    """
    if not m > 0:
        raise ValueError("truncation level must be positive")
    m = float(m)
    if max(gen.f0.sup_abs(), gen.g0.sup_abs()) <= m:
        new_gen = gen
    else:
        new_gen = replace(gen, f0=gen.f0.clamp(m), g0=gen.g0.clamp(m))
    bound = _payoff_sup(terminal)
    if bound is not None and bound <= m:
        new_terminal = terminal
    else:
        base = terminal

        def clipped(x, base=base, m=m):
            return np.clip(base(x), -m, m)

        new_terminal = Payoff(clipped, "bounded", "truncated", {"m": m, "base": base.to_config()})
    return new_gen, new_terminal


def apriori_bound_check(
    sol: GBSDESolution, gen: GeneratorSpec, band: VolatilityBand, p: float, gamma: float, interior: float = 0.5
) -> dict:
    """Evaluate the exponential a-priori bound at every grid node.

    LHS = exp(p gamma sigma_tilde^2 |Y_t|),
    RHS = E_t[exp(p gamma sigma_hat^2 |xi| + p gamma sigma_hat^2 int_t^T beta ds)]
    with beta_s = alpha_s + L2/2 + L1 sup_x |Y_s|. The conditional expectation
    comes from the G-heat engine on the solution grid. Comparisons are made in
    log space; ``max_violation`` is max(log LHS - log RHS) and should be <= 0.

    Only nodes within ``interior`` times the half width of the spatial centre
    are compared: near the edges the frozen linear extension of the grid
    understates the convex exponential on the right-hand side.
    """
    tilde, hat = band.tilde_sq, band.hat_sq  # raises when sigma_low = 0
    if p < 1:
        raise ValueError("order p must be >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    grid = sol.grid
    values = sol.values
    times = grid.times
    beta = gen.alpha(times) + 0.5 * gen.L2 + gen.L1 * np.max(np.abs(values), axis=1)
    # int_t^T beta ds by the trapezoid rule on the grid, accumulated backward.
    seg = 0.5 * (beta[1:] + beta[:-1]) * np.diff(times)
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    c = p * gamma * hat
    xi = values[-1]
    shift = c * float(np.max(np.abs(xi)))
    scaled = Payoff(lambda x: np.exp(c * np.abs(np.interp(x, grid.xs, xi)) - shift), "bounded", "custom")
    field = solve_g_heat(scaled, band, grid).values
    log_rhs = shift + np.log(field) + c * tail[:, None]
    log_lhs = p * gamma * tilde * np.abs(values)
    centre = 0.5 * (grid.x_min + grid.x_max)
    inside = np.abs(grid.xs - centre) <= interior * 0.5 * (grid.x_max - grid.x_min) + 1e-12
    gap = np.where(inside[None, :], log_lhs - log_rhs, -np.inf)
    worst = np.unravel_index(int(np.argmax(gap)), gap.shape)
    return {
        "p": p,
        "gamma": gamma,
        "sigma_tilde_sq": tilde,
        "sigma_hat_sq": hat,
        "growth_envelope_ok": bool(gamma >= 3.0 * gen.L2 - 1e-15),
        "interior": interior,
        "max_violation": float(gap[worst]),
        "min_slack": float(-gap[worst]),
        "worst_node": {"t": float(times[worst[0]]), "x": float(grid.xs[worst[1]])},
        "lhs_at_root": float(np.exp(np.interp(0.0, grid.xs, log_lhs[0]))),
        "rhs_at_root": float(np.exp(np.interp(0.0, grid.xs, log_rhs[0]))),
    }
