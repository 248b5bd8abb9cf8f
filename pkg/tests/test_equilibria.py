import cmath
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ctcsim.equilibria import (
    EPS_EIG,
    NoConvergence,
    ResidualTooLarge,
    SingularJacobian,
    all_fixed_points,
    analytic_boundaries,
    bistable_onset,
    classify_fixed_point,
    eigenvalues_trivial,
    match_eigenvalues,
    nontrivial_fixed_points,
    numeric_boundary,
    refine_fixed_point,
    trivial_fixed_point,
    unstable_dim_trivial,
)
from ctcsim.model import DimensionlessParams, jacobian, rhs

params_st = st.builds(DimensionlessParams, st.floats(0, 5), st.floats(0, 50), st.floats(0.1, 5))


def test_trivial_point():
    p = DimensionlessParams(1.2, 3.0, 1.0)
    assert tuple(trivial_fixed_point(p)) == (0.0, 0.0, 1.0)
    assert not np.any(rhs(trivial_fixed_point(p), p))


@given(params_st)
def test_closed_form_eigenvalues(p):
    # on (g r)^2 = 4 omega^2 the transverse block is defective and any
    # eigensolver splits the double root by ~sqrt(eps); see the test below
    scale = max(1.0, p.g * p.r)
    assume(abs((p.g * p.r) ** 2 - 4 * p.omega**2) > 1e-6 * scale**2)
    numeric = np.linalg.eigvals(jacobian(trivial_fixed_point(p), p))
    assert match_eigenvalues(numeric, eigenvalues_trivial(p)) <= 1e-9 * scale


@pytest.mark.parametrize("omega, r", [(2.0, 2.0), (1.5, 1.0), (0.7, 0.5)])
def test_eigenvalues_on_exceptional_curve(omega, r):
    p = DimensionlessParams(omega, 2 * omega / r, r)
    exact = eigenvalues_trivial(p)
    assert abs(exact[0] - (omega - 1)) <= 1e-7 and abs(exact[1] - (omega - 1)) <= 1e-7
    numeric = np.linalg.eigvals(jacobian(trivial_fixed_point(p), p))
    assert match_eigenvalues(numeric, exact) <= 1e-7 * max(1.0, 2 * omega)


def test_eigenvalue_examples():
    lin = eigenvalues_trivial(DimensionlessParams(1.5, 0.0, 2.0))
    assert match_eigenvalues(lin, [-1 + 1.5j, -1 - 1.5j, -0.5]) < 1e-15
    hopf = eigenvalues_trivial(DimensionlessParams(1.5, 2.0, 1.0))
    assert abs(hopf[0].real) < 1e-15
    assert abs(hopf[0].imag) == pytest.approx(math.sqrt(1.5**2 - 1))
    e = eigenvalues_trivial(DimensionlessParams(1.956, 13.4, 1.0))
    assert e[1].real == pytest.approx((11.4 - math.sqrt(13.4**2 - 4 * 1.956**2)) / 2)
    assert e[1].real == pytest.approx(-0.7081, abs=1e-4)
    assert unstable_dim_trivial(DimensionlessParams(1.956, 13.4, 1.0)) == 1


def test_type_one_point_report():
    rep = classify_fixed_point((0, 0, 1), DimensionlessParams(1.956, 2.4, 1.0))
    assert rep.unstable_dim == 2
    assert rep.kind == "Trivial"
    assert rep.max_real_part == pytest.approx(0.2)
    assert np.iscomplex(rep.eigenvalues[0])
    assert min(abs(rep.eigenvalues - (-1.0))) < 1e-12
    assert classify_fixed_point((0, 0, 1), DimensionlessParams(1.956, 0.0, 1.0)).stable


def test_bistable_pair_example():
    p = DimensionlessParams(0.5, 4.0, 1.0)
    plus, minus = nontrivial_fixed_points(p)
    assert plus.px == pytest.approx(math.sqrt(2.75 / 16), abs=1e-15)
    assert plus.px == pytest.approx(0.41458, abs=1e-5)
    assert plus.pz == pytest.approx(0.3125)
    for s in (plus, minus):
        assert np.linalg.norm(rhs(s, p)) <= 1e-12
        rep = classify_fixed_point(s, p)
        assert rep.unstable_dim == 0
    assert tuple(minus) == tuple(plus.mirrored())
    assert [r.kind for r in all_fixed_points(p)] == ["Trivial", "Pitchfork+", "Pitchfork-"]


@given(params_st)
def test_pair_exists_iff_above_line(p):
    w, g, r = p.as_tuple()
    pair = nontrivial_fixed_points(p)
    assert bool(pair) == (g * r > 1 + w * w)
    for s in pair:
        assert np.linalg.norm(rhs(s, p)) <= 1e-12 * max(1.0, g)
        assert tuple(s.mirrored()) in {tuple(q) for q in pair}


def test_newton_finds_only_rest_below_line():
    p = DimensionlessParams(0.5, 1.0, 1.0)
    rng = np.random.default_rng(0)
    roots = set()
    for seed in rng.uniform([-2, -2, -1], [2, 2, 2], size=(100, 3)):
        try:
            x = refine_fixed_point(seed, p)
        except (NoConvergence, SingularJacobian):
            continue
        roots.add(tuple(np.round(x, 8)))
    assert roots == {(0.0, 0.0, 1.0)}


def test_refine_examples():
    sub = DimensionlessParams(1.5, 1.0, 1.0)
    assert refine_fixed_point((0.01, 0, 1), sub) == pytest.approx((0, 0, 1), abs=1e-12)
    p = DimensionlessParams(0.5, 4.0, 1.0)
    exact = nontrivial_fixed_points(p)[0]
    near = np.asarray(exact) + [0.05, -0.02, 0.03]
    assert refine_fixed_point(near, p) == pytest.approx(tuple(exact), abs=1e-12)
    _, its = refine_fixed_point(exact, p, full_output=True)
    assert its <= 1


def test_refine_converges_quadratically():
    p = DimensionlessParams(0.5, 4.0, 1.0)
    exact = np.asarray(nontrivial_fixed_points(p)[0])
    x, its = refine_fixed_point(exact + 1e-2, p, full_output=True)
    # 1e-2 -> 1e-4 -> 1e-8 -> 1e-16: quadratic convergence needs about 3 steps
    assert its <= 4
    assert np.linalg.norm(np.asarray(x) - exact) <= 1e-12


def test_refine_errors():
    p = DimensionlessParams(0.0, 1.0, 1.0)
    # px = 0 and pz = 1/g: the first column of J vanishes
    with pytest.raises(SingularJacobian):
        refine_fixed_point((0.0, 0.1, 1.0), p)
    with pytest.raises(NoConvergence):
        refine_fixed_point((3, 3, 3), DimensionlessParams(1.5, 5.0, 1.0), max_iter=1)


def test_residual_guard():
    with pytest.raises(ResidualTooLarge):
        classify_fixed_point((0.5, 0, 1), DimensionlessParams(1.0, 1.0, 1.0))


def test_boundary_examples():
    b = analytic_boundaries([0.5, 1.5], r=1.0)
    assert b.hopf[1] == 2.0 and b.manifold_dim[1] == 3.25
    assert b.pitchfork[0] == 1.25
    assert np.isnan(b.hopf[0]) and np.isnan(b.pitchfork[1])
    half = analytic_boundaries([0.5, 1.5], r=2.0)
    assert half.hopf[1] == 1.0 and half.manifold_dim[1] == 1.625 and half.pitchfork[0] == 0.625


@pytest.mark.parametrize("omega", [1.1, 1.5, 1.956, 3.0])
@pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
def test_numeric_boundaries_above_unity(omega, r):
    b = analytic_boundaries(omega, r)
    assert numeric_boundary("hopf", omega, r) == pytest.approx(b.hopf[0], abs=1e-6)
    assert numeric_boundary("manifold_dim", omega, r) == pytest.approx(b.manifold_dim[0], abs=1e-6)


@pytest.mark.parametrize("omega", [0.2, 0.5, 0.9])
def test_numeric_pitchfork(omega):
    assert numeric_boundary("pitchfork", omega, 1.0) == pytest.approx(1 + omega**2, abs=1e-6)
    assert bistable_onset(omega, 1.0) == pytest.approx(1 + omega**2, abs=1e-5)


def test_boundary_continuity_at_unit_omega():
    b = analytic_boundaries([1.0 + 1e-12], r=1.0)
    assert b.hopf[0] == pytest.approx(b.manifold_dim[0])


@given(st.floats(1.01, 4), st.floats(0.1, 4), st.floats(0, 1))
def test_unstable_dimension_bands(omega, r, u):
    lo, mid = 2 / r, (1 + omega**2) / r
    band = 1e-6 / r
    g = u * 3 * mid
    assume(abs(g - lo) > band and abs(g - mid) > band)
    dim = unstable_dim_trivial(DimensionlessParams(omega, g, r))
    expected = 0 if g < lo else 2 if g < mid else 1
    assert dim == expected


def test_marginal_flag():
    rep = classify_fixed_point((0, 0, 1), DimensionlessParams(1.5, 2.0, 1.0))
    assert rep.marginal and not rep.stable
    assert rep.unstable_dim == 0
    assert EPS_EIG == 1e-9


def test_report_serializes():
    rec = classify_fixed_point((0, 0, 1), DimensionlessParams(1.956, 2.4, 1.0)).to_record()
    assert rec["unstable_dim"] == 2 and len(rec["eigenvalues"]) == 3
