import csv

import numpy as np
import pytest

from instances import TIMES, skorokhod_input, soft_pair, stability_pair
from mrgbsde.errors import AssumptionViolation, GridMismatch, InadmissibleAnchor, RootFindingError
from mrgbsde.skorokhod import (
    AffineBoundary,
    BoundaryPair,
    InputPath,
    ReversedBoundary,
    SoftBoundary,
    TabulatedBoundary,
    TimeCurve,
    boundary_from_config,
    solve_bsp,
    solve_sp,
    stability_certificate_bsp,
    stability_certificate_sp,
)
from oracles import two_sided_skorokhod

T = np.linspace(0.0, 1.0, 101)


def constant_pair(lo=-1.0, hi=1.0, kappa=1.0):
    return BoundaryPair(AffineBoundary(kappa, hi), AffineBoundary(kappa, lo))


def test_time_curve_interpolates_and_extends():
    c = TimeCurve([[0.0, 1.0], [1.0, 3.0]])
    assert c(0.5) == pytest.approx(2.0)
    assert c(2.0) == 3.0 and c(-1.0) == 1.0
    assert TimeCurve(0.7)(0.3) == 0.7


def test_ramp_is_capped_at_the_upper_barrier():
    sol = solve_sp(InputPath(T, 2 * T), constant_pair())
    assert np.allclose(sol.x, np.minimum(2 * T, 1.0), atol=1e-15)
    assert np.allclose(sol.k, -np.maximum(2 * T - 1.0, 0.0), atol=1e-15)
    assert sol.k_r[-1] == 0.0


def test_initial_point_outside_is_projected():
    sol = solve_sp(InputPath(T, 2.5 + 0 * T), constant_pair())
    assert sol.x[0] == 1.0 and sol.k_l[0] == pytest.approx(1.5)


@pytest.mark.parametrize("seed", range(20))
def test_constant_barriers_match_explicit_map(seed):
    rng = np.random.default_rng(seed)
    lo, hi = -rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)
    s = skorokhod_input(rng)
    sol = solve_sp(InputPath(TIMES, s), constant_pair(lo, hi, rng.uniform(0.5, 2.0)))
    assert np.max(np.abs(sol.x - two_sided_skorokhod(s, lo, hi))) <= 1e-9


def test_soft_boundary_certificates():
    rng = np.random.default_rng(11)
    b = soft_pair(rng)
    s = skorokhod_input(rng)
    for sol in (solve_sp(InputPath(TIMES, s), b), solve_bsp(InputPath(TIMES, s, 0.0), b)):
        c = sol.certificates
        assert max(c["constraint_l"], c["constraint_r"]) <= 1e-9
        assert c["flatness_l"] <= 1e-9 * max(1.0, c["total_k_l"])
        assert c["flatness_r"] <= 1e-9 * max(1.0, c["total_k_r"])
        assert not c["simultaneous_push"]
        assert c["decomposition_residual"] <= 1e-12
        assert np.all(np.diff(sol.k_l) >= 0) and np.all(np.diff(sol.k_r) >= 0)


def test_backward_closed_form():
    # l far away, r root d_t = 0.2 (1 - t): x_t = d_t and k_t = 0.2 t
    pair = BoundaryPair(AffineBoundary(1.0, 10.0), AffineBoundary(1.0, TimeCurve([[0.0, 0.2], [1.0, 0.0]])))
    sol = solve_bsp(InputPath(T, 0 * T, 0.0), pair)
    assert np.max(np.abs(sol.k - 0.2 * T)) <= 1e-12
    assert np.max(np.abs(sol.x - 0.2 * (1 - T))) <= 1e-12
    assert sol.k[0] == 0.0


def test_backward_anchor_rules():
    pair = constant_pair()
    with pytest.raises(InadmissibleAnchor):
        solve_bsp(InputPath(T, 0 * T, 1.5), pair)
    near = solve_bsp(InputPath(T, 0 * T, 1.0 + 5e-5), pair, anchor_tol=1e-4)
    assert near.anchor == 1.0
    with pytest.raises(ValueError):
        solve_bsp(InputPath(T, 0 * T), pair)


def test_empty_interval_rejected():
    pair = BoundaryPair(AffineBoundary(1.0, -1.0), AffineBoundary(1.0, 1.0))
    with pytest.raises(AssumptionViolation):
        solve_sp(InputPath(T, T), pair)
    with pytest.raises(AssumptionViolation):
        pair.validate(T)


def test_soft_roots_by_bisection():
    b = SoftBoundary(1.0, 0.5, 0.8)
    root = b.roots(np.array([0.0, 0.5]))
    assert np.all(np.abs(b.value(0.0, root)) <= 1e-9 * 1.5)


def test_tabulated_boundary():
    lattice = np.linspace(-2, 2, 9)
    tab = TabulatedBoundary(T[:3], lattice, np.tile(2.0 * lattice - 0.5, (3, 1)))
    assert tab.roots(T[:3]) == pytest.approx([0.25] * 3, abs=1e-12)
    assert tab.value(T[1], 3.0) == pytest.approx(5.5)
    shifted = TabulatedBoundary(T[:3], lattice, np.tile(2.0 * lattice + 10.0, (3, 1)))
    with pytest.raises(RootFindingError):
        shifted.roots(T[:3])


def test_reversed_boundary_reads_mirrored_time():
    base = AffineBoundary(1.0, TimeCurve([[0.0, 0.0], [1.0, 1.0]]))
    rev = ReversedBoundary(base, 1.0)
    assert rev.value(0.25, 0.0) == pytest.approx(base.value(0.75, 0.0))


def test_config_round_trips():
    rng = np.random.default_rng(5)
    pair = soft_pair(rng)
    back = BoundaryPair.from_config(pair.to_config())
    xs = np.linspace(-3, 3, 13)
    for t in (0.0, 0.4, 1.0):
        assert np.array_equal(back.l.value(t, xs), pair.l.value(t, xs))
    assert boundary_from_config(AffineBoundary(2.0, 0.5).to_config()).kappa == 2.0
    path = InputPath(T, np.sin(T), 0.3)
    again = InputPath.from_json(path.to_json())
    assert np.array_equal(again.values, path.values) and again.anchor == 0.3


def test_stability_certificates_small_campaign():
    rng = np.random.default_rng(99)
    for backward in (False, True):
        for _ in range(10):
            s1, b1, s2, b2 = stability_pair(rng, backward)
            solve = solve_bsp if backward else solve_sp
            cert = (stability_certificate_bsp if backward else stability_certificate_sp)(solve(s1, b1), solve(s2, b2))
            assert cert["slack"] >= -1e-9


def test_certificate_grid_mismatch():
    pair = constant_pair()
    a = solve_sp(InputPath(T, T), pair)
    b = solve_sp(InputPath(T[:50], T[:50]), pair)
    with pytest.raises(GridMismatch):
        stability_certificate_sp(a, b)


def test_csv_columns(tmp_path):
    sol = solve_sp(InputPath(T, 2 * T), constant_pair())
    sol.to_csv(tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["t", "x", "k", "k_r", "k_l"]
    assert len(rows) == len(T) + 1
