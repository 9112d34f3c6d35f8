import csv
import math

import numpy as np
import pytest

from mrgbsde.engine import (
    GridSpec,
    Payoff,
    VolatilityBand,
    VolatilityTree,
    expectations_at_origin,
    g_eval,
    g_expectation,
    scenario_supremum_oracle,
    solve_g_heat,
)
from mrgbsde.errors import BudgetExceeded, CFLViolation, ConfigError, UndefinedConstant
from oracles import brute_force_sup


def test_g_function_values(band):
    assert band.g(2.0) == pytest.approx(1.0)
    assert band.g(-2.0) == pytest.approx(-0.25)
    assert g_eval(0.0, band) == 0.0
    a = np.linspace(-3, 3, 13)
    assert np.allclose(band.g(a), 0.5 * (np.maximum(a, 0) - 0.25 * np.maximum(-a, 0)))


def test_band_rejects_inverted_volatilities():
    with pytest.raises(ValueError):
        VolatilityBand(1.0, 0.5)


def test_tilde_sq_undefined_without_lower_volatility():
    with pytest.raises(UndefinedConstant):
        VolatilityBand(0.0, 1.0).tilde_sq


def test_cfl_violation_raises(band):
    with pytest.raises(CFLViolation):
        GridSpec(0.0, 1.0, 10, -5.0, 5.0, 201).check_cfl(band)


def test_for_band_picks_valid_step_count(band):
    grid = GridSpec.for_band(band, n_space=101)
    assert grid.cfl_ratio(band) <= 0.5
    coarser = GridSpec(0.0, 1.0, grid.n_time - 1, grid.x_min, grid.x_max, grid.n_space)
    assert coarser.cfl_ratio(band) > 0.5


def test_constants_and_linear_payoffs_are_exact(band):
    grid = GridSpec.for_band(band, n_space=101)
    assert g_expectation(Payoff.constant(2.5), band, grid) == pytest.approx(2.5, abs=1e-12)
    assert g_expectation(Payoff.linear(3.0, -1.0), band, grid) == pytest.approx(-1.0, abs=1e-12)


def test_convex_payoff_uses_upper_volatility(band):
    grid = GridSpec.for_band(band, n_space=201, t_end=0.5)
    assert g_expectation(Payoff.quadratic(), band, grid) == pytest.approx(0.5, abs=1e-3)
    assert g_expectation(Payoff.quadratic(a=-1.0), band, grid) == pytest.approx(-0.125, abs=1e-3)


def test_sublinearity_properties(band):
    grid = GridSpec.for_band(band, n_space=161)
    x, y = Payoff.call(0.2), Payoff.tanh(1.0, 2.0, -0.3)
    both = Payoff(lambda s: x(s) + y(s), "linear")
    ex, ey = g_expectation(x, band, grid), g_expectation(y, band, grid)
    assert g_expectation(both, band, grid) <= ex + ey + 1e-12
    assert g_expectation(Payoff(lambda s: 3.0 * y(s), "bounded"), band, grid) == pytest.approx(3.0 * ey, abs=1e-12)
    assert -g_expectation(Payoff(lambda s: -y(s), "bounded"), band, grid) <= ey + 1e-12


def test_monotone_in_payoff(band):
    grid = GridSpec.for_band(band, n_space=121)
    lo = g_expectation(Payoff.tanh(), band, grid)
    hi = g_expectation(Payoff(lambda s: np.tanh(s) + 0.01 * np.exp(-s * s), "bounded"), band, grid)
    assert hi >= lo


def test_field_solution_is_read_only(band):
    sol = solve_g_heat(Payoff.call(), band, GridSpec.for_band(band, n_space=41))
    with pytest.raises(ValueError):
        sol.values[0, 0] = 1.0


def test_field_csv_layout(tmp_path, band):
    grid = GridSpec.for_band(band, n_space=11)
    sol = solve_g_heat(Payoff.quadratic(), band, grid)
    path = tmp_path / "field.csv"
    sol.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "x", "u"]
    assert len(rows) == 1 + (grid.n_time + 1) * grid.n_space
    assert float(rows[1][2]) == sol.values[0, 0]


def test_batched_expectations_match_window_solves(band):
    grid = GridSpec.for_band(band, n_space=81)
    phi = Payoff.call(0.1)
    idx = np.array([0, 7, grid.n_time // 2, grid.n_time])
    slices = np.tile(phi.sample(grid), (len(idx), 1))
    batched = expectations_at_origin(slices, idx, band, grid)
    for value, n in zip(batched, idx):
        if n == 0:
            ref = float(np.interp(0.0, grid.xs, phi.sample(grid)))
        else:
            ref = g_expectation(phi, band, GridSpec(0.0, grid.times[n], int(n), grid.x_min, grid.x_max, grid.n_space))
        assert value == pytest.approx(ref, abs=1e-14)


@pytest.mark.parametrize(
    "payoff",
    [Payoff.call(0.0), Payoff.quadratic(), Payoff.tanh(1.0, 2.0, 0.3), Payoff(lambda x: np.sin(3 * x), "bounded")],
    ids=["call", "square", "tanh", "sine"],
)
def test_tree_matches_full_enumeration(band, payoff):
    tree = scenario_supremum_oracle(payoff, band, 6, 0.7)
    brute = brute_force_sup(payoff, (band.sigma_low, band.sigma_high), 0.7, 6)
    assert tree == pytest.approx(brute, abs=1e-12)


def test_tree_reachability_counts(band):
    tree = VolatilityTree(band, 1.0, 5)
    nodes = {(0, 0)}
    for k in range(6):
        mask = np.zeros(tree.a.shape, dtype=bool)
        for a, b in nodes:
            mask[a + 5, b + 5] = True
        assert np.array_equal(tree.reachable(k), mask)
        nodes = {(a + da, b + db) for a, b in nodes for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1))}


def test_tree_budget_guard(band):
    with pytest.raises(BudgetExceeded):
        VolatilityTree(band, 1.0, 17)


def test_payoff_config_round_trip():
    for p in (Payoff.call(0.5, 2.0), Payoff.tanh(0.7, 1.3, -0.2), Payoff.piecewise_linear([[-1, 0], [0, 1], [2, -1]])):
        q = Payoff.from_config(p.to_config())
        xs = np.linspace(-3, 3, 31)
        assert np.array_equal(p(xs), q(xs))


def test_payoff_config_errors():
    with pytest.raises(ConfigError):
        Payoff.from_config({"family": "digital"})
    with pytest.raises(ConfigError):
        Payoff.from_config({"family": "call", "strik": 1.0})


def test_normal_call_reference(band):
    grid = GridSpec.for_band(band, n_space=301)
    assert g_expectation(Payoff.call(), band, grid) == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=2e-3)
