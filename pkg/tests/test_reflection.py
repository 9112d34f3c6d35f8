import csv

import numpy as np
import pytest

from instances import bounded_instance
from mrgbsde.engine import GridSpec, Payoff, VolatilityBand, expectations_at_origin
from mrgbsde.errors import AssumptionViolation, GridMismatch, UndefinedConstant
from mrgbsde.gbsde import GeneratorSpec, solve_gbsde
from mrgbsde.reflection import (
    LossFunction,
    LossSpec,
    contraction_constant,
    default_delta,
    interval_knots,
    solve_frozen,
    solve_bounded,
    solve_unbounded,
    theta_distance,
    unbounded_step,
    verify_solution,
)
from mrgbsde.skorokhod import TimeCurve

BAND = VolatilityBand(0.25, 1.0)
GRID = GridSpec.for_band(BAND, n_space=81, half_width=6.0)


def closed_form_loss():
    # lower barrier d_t = 0.2 (1 - t) on the mean, upper barrier far away
    return LossSpec(LossFunction(1.0, 0.0, 1.0), LossFunction(1.0, 0.0, TimeCurve([[0.0, 0.2], [1.0, 0.0]])))


@pytest.fixture(scope="module")
def closed_form():
    return solve_bounded(Payoff.linear(), GeneratorSpec(), closed_form_loss(), BAND, GRID)


@pytest.fixture(scope="module")
def coupled():
    gen = GeneratorSpec(a_g=0.4, gamma_g=0.3)
    loss = LossSpec(LossFunction(1.0, 0.0, TimeCurve([[0.0, -0.1], [1.0, 0.5]])), LossFunction(1.0, 0.0, -1.0))
    return solve_bounded(Payoff.tanh(0.8, 0.5), gen, loss, BAND, GRID)


def test_loss_function_shape():
    f = LossFunction(2.0, 0.5, 0.3)
    assert f(0.0, 1.0) == pytest.approx(2.0 + 0.5 * np.arctan(1.0) - 0.3)
    assert (f.c, f.C) == (2.0, 2.5)
    with pytest.raises(AssumptionViolation):
        LossFunction(1.0, -1.0)


def test_loss_spec_validation():
    ok = LossSpec(LossFunction(1.0, 0.5, 0.5), LossFunction(1.0, 0.5, -0.5))
    assert ok.validate(np.linspace(0, 1, 5))["gap"] > 0
    bad = LossSpec(LossFunction(1.0, 0.5, 0.3), LossFunction(1.0, -0.5, -1.0))
    with pytest.raises(AssumptionViolation):
        bad.validate(np.linspace(0, 1, 5))


def test_closed_form_instance(closed_form):
    sol = closed_form
    t = GRID.times
    assert np.max(np.abs(sol.a - 0.2 * t)) <= 2e-3
    assert np.all(sol.a_l == 0.0)
    assert np.max(np.abs(sol.mean_y - 0.2 * (1 - t))) <= 2e-3
    rep = verify_solution(sol)
    assert rep["passed"], rep["checks"]
    assert rep["flatness_R"] <= 1e-3 * sol.a[-1]


def test_zero_lipschitz_means_single_solve(closed_form):
    assert closed_form.iterations == [1]
    assert closed_form.knots == [0, GRID.n_time]


def test_representation_identity(coupled):
    a = coupled.a
    assert np.max(np.abs(coupled.Y - coupled.y - (a[-1] - a)[:, None])) <= 1e-14
    assert coupled.a_r[0] == 0.0 and coupled.a_l[0] == 0.0


def test_decomposition_is_minimal(coupled):
    d_r, d_l = np.diff(coupled.a_r), np.diff(coupled.a_l)
    assert np.all(d_r >= 0) and np.all(d_l >= 0)
    assert not np.any((d_r > 0) & (d_l > 0))


def test_coupled_instance_is_stitched_and_certified(coupled):
    assert len(coupled.knots) > 2
    assert coupled.a_l[-1] > 0.05  # the upper barrier binds
    rep = verify_solution(coupled)
    assert rep["passed"], rep["checks"]


def test_stitching_continuity(coupled):
    for k, knot in enumerate(coupled.knots[1:-1]):
        # the earlier piece is solved from the later piece's value at the shared knot
        left = coupled.components[k]
        assert np.max(np.abs(left.values[-1] - coupled.Y[knot])) <= 1e-14


def test_contraction_gaps(coupled):
    for gaps in coupled.gap_history:
        ratios = [b / a for a, b in zip(gaps, gaps[1:]) if a > 1e-12]
        assert all(r <= 0.6 for r in ratios[1:])


def test_freeze_consistency(coupled):
    sol = coupled
    for k in range(len(sol.knots) - 1):
        i0, i1 = sol.knots[k], sol.knots[k + 1]
        again = solve_frozen(sol.Y[i0 : i1 + 1], sol.Y[i1], sol.gen, sol.loss, BAND, GRID.window(i0, i1), mean_grid=GRID)
        assert np.max(np.abs(again.Y - sol.Y[i0 : i1 + 1])) <= 1e-6


def test_twin_initialisations_agree():
    gen = GeneratorSpec(a_g=0.4, gamma_g=0.3)
    loss = LossSpec(LossFunction(1.0, 0.0, TimeCurve([[0.0, -0.1], [1.0, 0.5]])), LossFunction(1.0, 0.0, -1.0))
    grid = GridSpec(0.0, 1.0, 60, -6.0, 6.0, 61)
    a = solve_bounded(Payoff.tanh(0.8, 0.5), gen, loss, BAND, grid, init="unreflected")
    b = solve_bounded(Payoff.tanh(0.8, 0.5), gen, loss, BAND, grid, init="zero")
    assert np.max(np.abs(a.Y - b.Y)) <= 1e-6
    with pytest.raises(GridMismatch):
        solve_bounded(Payoff.tanh(), gen, loss, BAND, grid, init=np.zeros((3, 3)))


def test_negative_control_detects_corrupted_reflection(closed_form):
    sol = closed_form
    broken = type(sol)(**{**sol.__dict__, "a_r": sol.a_r * 0.5})
    rep = verify_solution(broken)
    assert not rep["passed"]
    assert not rep["checks"]["constraints"]


def test_soft_losses_are_certified():
    gen = GeneratorSpec(a_g=0.3, gamma_g=0.5)
    loss = LossSpec(
        LossFunction(1.0, 0.5, TimeCurve([[0.0, -0.3], [1.0, 0.5]])), LossFunction(1.0, 0.5, -1.0)
    )
    grid = GridSpec(0.0, 1.0, 60, -6.0, 6.0, 61)
    sol = solve_bounded(Payoff.tanh(1.0, 0.5), gen, loss, BAND, grid, n_lattice=65)
    rep = verify_solution(sol)
    assert rep["passed"], rep
    assert sol.a_l[-1] > 0.1


def test_uniform_estimate_for_unreflected_difference():
    # sup|y1 - y2| <= L1 T sigma_high ||U1 - U2|| (sigma_high = 1 here)
    rng = np.random.default_rng(4)
    X, Tt = GRID.xs[None, :], GRID.times[:, None]
    for _ in range(5):
        gen = GeneratorSpec(a_f=rng.uniform(-0.5, 0.5), a_g=rng.uniform(-0.5, 0.5), b_g=rng.uniform(-0.3, 0.3), gamma_g=rng.uniform(0, 0.5))
        term = Payoff.tanh(rng.uniform(0.5, 1.0), rng.uniform(0.3, 0.6))
        U1 = rng.uniform(-1, 1) * np.sin(rng.uniform(0.2, 1.0) * X) + rng.uniform(-1, 1) * Tt
        U2 = rng.uniform(-1, 1) * np.cos(rng.uniform(0.2, 1.0) * X) + 0.0 * Tt
        y1 = solve_gbsde(term, gen, BAND, GRID, frozen_y=U1).values
        y2 = solve_gbsde(term, gen, BAND, GRID, frozen_y=U2).values
        bound = gen.L1 * 1.0 * BAND.sigma_high * np.max(np.abs(U1 - U2))
        assert np.max(np.abs(y1 - y2)) <= bound + 1e-12


def test_uniform_estimate_for_reflection_difference():
    # sup|A1 - A2| <= (3C/c) sup_t E|y1_t - y2_t|
    rng = np.random.default_rng(8)
    loss = LossSpec(LossFunction(1.0, 0.0, TimeCurve([[0.0, 0.1], [1.0, 0.6]])), LossFunction(1.0, 0.0, -0.5))
    gen = GeneratorSpec(a_f=0.4, a_g=-0.3, gamma_g=0.2)
    term = Payoff.tanh(0.8, 0.5)
    X, Tt = GRID.xs[None, :], GRID.times[:, None]
    for _ in range(3):
        U1 = rng.uniform(-1, 1) * np.sin(X) + rng.uniform(-1, 1) * Tt
        U2 = rng.uniform(-1, 1) * np.cos(X) + 0.0 * Tt
        s1 = solve_frozen(U1, term, gen, loss, BAND, GRID)
        s2 = solve_frozen(U2, term, gen, loss, BAND, GRID)
        e = expectations_at_origin(np.abs(s1.y - s2.y), np.arange(GRID.n_time + 1), BAND, GRID)
        assert np.max(np.abs(s1.a - s2.a)) <= 3 * loss.C / loss.c * e.max() + 1e-9


def test_delta_policy():
    loss = LossSpec(LossFunction(2.0, 0.0, 1.0), LossFunction(1.0, 0.0, -1.0))
    gen = GeneratorSpec(a_g=0.5)
    assert contraction_constant(loss, gen, BAND) == pytest.approx((1 + 3 * 2.0) * 0.5 * 1.0)
    assert default_delta(loss, gen, BAND, 1.0) == pytest.approx(0.5 / 3.5)
    assert default_delta(loss, GeneratorSpec(), BAND, 1.0) == 1.0
    assert interval_knots(GridSpec(0, 1, 100, -1, 1, 11), 0.3) == [0, 25, 50, 75, 100]
    with pytest.raises(GridMismatch):
        interval_knots(GridSpec(0, 1, 3, -1, 1, 11), 0.1)


def test_unbounded_step_policy():
    loss = LossSpec(LossFunction(1.0, 0.0, 1.0), LossFunction(1.0, 0.0, -1.0))
    gen = GeneratorSpec(a_g=0.1)
    expected = 0.9 * BAND.tilde_sq / ((128 + 768) * 0.1 * BAND.hat_sq)
    assert unbounded_step(loss, gen, BAND, 1.0) == pytest.approx(min(expected, default_delta(loss, gen, BAND, 1.0)))
    with pytest.raises(UndefinedConstant):
        unbounded_step(loss, gen, VolatilityBand(0.0, 1.0), 1.0)


@pytest.fixture(scope="module")
def truncation_pair():
    grid = GridSpec(0.0, 1.0, 80, -8.0, 8.0, 61)
    gen = GeneratorSpec(gamma_g=1.0)
    loss = LossSpec(LossFunction(1.0, 0.0, 0.3), LossFunction(1.0, 0.0, -1.0))
    return solve_unbounded(Payoff.linear(), gen, loss, BAND, grid, m_schedule=(1, 2))


def test_theta_distance_definitions(truncation_pair):
    sol, diag = truncation_pair
    same = theta_distance(sol, sol, 0.5)
    assert same["sup_delta_Y"] == pytest.approx(np.max(np.abs(sol.Y)), rel=1e-12)
    assert theta_distance(sol, sol, 0.0)["sup_delta_A"] == pytest.approx(np.max(np.abs(sol.a)))
    with pytest.raises(ValueError):
        theta_distance(sol, sol, 1.0)
    assert [e["theta"] for e in diag.entries] == [0.5, 0.9, 0.99]


def test_theta_regression(truncation_pair):
    _, diag = truncation_pair
    entry = diag.entries[1]
    # frozen from this implementation
    assert entry["sup_delta_Y"] == pytest.approx(THETA_09_SUP_DELTA_Y, rel=1e-9)


THETA_09_SUP_DELTA_Y = 12.552692994728524


def test_csv_outputs(tmp_path, closed_form):
    closed_form.to_csv(tmp_path / "mr.csv")
    rows = list(csv.reader(open(tmp_path / "mr.csv")))
    assert rows[0] == ["t", "a", "a_r", "a_l", "mean_Y", "lower_root", "upper_root"]
    assert len(rows) == GRID.n_time + 2
    closed_form.field_csv(tmp_path / "field.csv")
    assert next(csv.reader(open(tmp_path / "field.csv")))[:2] == ["t", "x"]


def test_bounded_instance_generator():
    terminal, gen, loss = bounded_instance(np.random.default_rng(0))
    assert loss.L.is_affine and loss.R.is_affine
    assert gen.L1 > 0
