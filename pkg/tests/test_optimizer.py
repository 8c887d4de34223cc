import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

import dplab.random_times as rt
from dplab.market import Coeff, MarketSpec
from dplab.optimizer import (NoAdmissibleOptimum, NoInteriorOptimum,
                             OptimalityInputs, SolveResult, SolverConfig,
                             after_residual, before_residual, build_strategy,
                             solve_after_default, solve_before_default,
                             solve_quadratic_closed_form)

# frozen oracles for pi = a + b*kappa/(1 + pi*kappa): admissible real root
# of the equivalent quadratic via companion-matrix eigenvalues (np.roots)
QUAD_ORACLE = {
    (0.8, 0.5, -0.4): 0.5443327806252011,
    (1.2, 0.3, 0.6): 1.301086571531187,
    (0.5, 1.0, -0.25): 0.2344355629253626,
    (2.0, 0.8, -0.3): 1.5511199646212324,
}


def test_inputs_validation():
    with pytest.raises(ValueError):
        OptimalityInputs(excess=0.1, sigma2=-1.0)
    with pytest.raises(ValueError, match="degenerate"):
        OptimalityInputs(excess=0.1, sigma2=0.0)
    with pytest.raises(ValueError):
        OptimalityInputs(excess=0.1, sigma2=1.0, Z=0.0)
    with pytest.raises(ValueError):
        OptimalityInputs(excess=0.1, sigma2=1.0, kappa=0.0)
    with pytest.raises(ValueError):
        OptimalityInputs(excess=0.1, sigma2=1.0, kappa=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    assert float(SolveResult(pi=0.25, residual=0.0)) == 0.25


def test_after_default_merton_ratio():
    ii = OptimalityInputs(excess=0.05, sigma2=0.0625)
    out = solve_after_default(ii)
    assert out.pi == pytest.approx(0.8, abs=1e-12)
    assert abs(out.residual) < 1e-12


def test_after_default_with_atoms():
    ii = OptimalityInputs(excess=0.05, sigma2=0.04,
                          atoms=((0.3, 2.0), (-0.2, 1.0)), kappa=-0.4)
    out = solve_after_default(ii)
    assert abs(float(after_residual(out.pi, ii))) < 1e-12
    assert 1.0 + out.pi * -0.4 > 0.0
    assert 1.0 + out.pi * 0.3 > 0.0 and 1.0 + out.pi * -0.2 > 0.0
    # the condition is strictly decreasing: the root is the unique one
    grid = np.linspace(out.pi - 0.5, out.pi + 0.5, 11)
    vals = after_residual(grid, ii)
    assert np.all(np.diff(vals) < 0.0)


def test_quadratic_closed_form_oracles():
    for (a, b, k), want in QUAD_ORACLE.items():
        out = solve_quadratic_closed_form(a, b, k)
        assert out.pi == pytest.approx(want, abs=1e-12)
        assert abs(out.residual) < 1e-12
    with pytest.raises(ValueError):
        solve_quadratic_closed_form(1.0, -0.5, -0.4)
    with pytest.raises(ValueError):
        solve_quadratic_closed_form(1.0, 0.5, 0.0)
    # b = 0 with 1 + a*kappa <= 0: the branch lands on -1/kappa exactly
    with pytest.raises(NoInteriorOptimum):
        solve_quadratic_closed_form(-2.0, 0.0, 0.5)


@given(a=hs.floats(-3.0, 3.0), b=hs.floats(0.0, 5.0),
       k=hs.floats(-0.9, 0.9).filter(lambda k: abs(k) > 0.01))
@settings(max_examples=200, deadline=None)
def test_quadratic_closed_form_always_admissible(a, k, b):
    # whenever a root is returned it is accurate and strictly interior;
    # a boundary collapse (possible only for tiny b) raises instead
    try:
        out = solve_quadratic_closed_form(a, b, k)
    except NoInteriorOptimum:
        return
    assert abs(out.residual) < 1e-10
    assert 1.0 + out.pi * k > 0.0


def test_before_default_matches_closed_form():
    sig = 0.25
    ii = OptimalityInputs(excess=0.05, sigma2=sig * sig, kappa=-0.4,
                          Z=0.8, trace=-0.3, lam=0.45)
    out = solve_before_default(ii)
    a = 0.05 / sig ** 2 + (-0.3 / 0.8) / sig
    b = (0.45 / 0.8) / sig ** 2
    ref = solve_quadratic_closed_form(a, b, -0.4)
    assert out.pi == pytest.approx(ref.pi, abs=1e-10)
    assert abs(float(before_residual(out.pi, ii))) < 1e-12


def test_before_default_needs_intensity():
    ii = OptimalityInputs(excess=0.05, sigma2=0.04, kappa=-0.4,
                          intensity_hypothesis=False)
    with pytest.raises(NoAdmissibleOptimum, match="no intensity"):
        solve_before_default(ii)


def test_before_default_with_atoms_residual():
    ii = OptimalityInputs(excess=0.06, sigma2=0.09, atoms=((0.5, 1.2),),
                          kappa=-0.3, Z=0.9, trace=0.2, lam=0.6)
    out = solve_before_default(ii)
    assert abs(float(before_residual(out.pi, ii))) < 1e-12
    assert 1.0 + out.pi * 0.5 > 0.0 and 1.0 + out.pi * -0.3 > 0.0


def test_unbounded_condition_raises():
    # excess too large for the bracket: no interior root on the
    # admissible interval
    ii = OptimalityInputs(excess=10.0, sigma2=1e-12, atoms=((0.5, 1.0),),
                          kappa=None)
    with pytest.raises(NoInteriorOptimum):
        solve_after_default(ii, SolverConfig(bracket_limit=1e3))


# ---------------------------------------------------------------------------
# build_strategy

SPEC = MarketSpec(rho=0.02, mu=0.07, sigma=0.25, kappa=-0.4)


def test_build_strategy_argmax_refused():
    with pytest.raises(NoAdmissibleOptimum, match="no intensity"):
        build_strategy(rt.ArgmaxTime(), SPEC, T=1.0)


def test_build_strategy_callable_coeff_refused():
    spec = MarketSpec(rho=0.02, mu=Coeff(before=lambda t: 0.07 + 0.0 * t),
                      sigma=0.25, kappa=-0.4)
    with pytest.raises(ValueError, match="constant"):
        build_strategy(rt.HalfFinalTime(), spec, T=1.0)


def test_half_final_rule_zeroes_the_condition():
    st = build_strategy(rt.HalfFinalTime(), SPEC, T=1.0)
    for t, w in [(0.0, 0.0), (0.25, 1.3), (0.5, -0.8), (0.9, 0.1),
                 (0.75, 2.0)]:
        dlt = 1.0 - t
        pi = float(np.asarray(st.before(np.array(t), np.array(w), None)))
        ii = OptimalityInputs(excess=0.05, sigma2=0.0625, kappa=-0.4,
                              Z=float(rt.z_half(w, dlt)),
                              trace=float(rt.trace_half(w, dlt)),
                              lam=float(rt.intensity_half(w, dlt)))
        assert abs(float(before_residual(pi, ii))) < 1e-9
    # deep tail substitution keeps the rule finite
    far = float(np.asarray(st.before(np.array(0.0), np.array(40.0), None)))
    assert math.isfinite(far)


def test_half_final_after_rule_is_merton():
    spec = MarketSpec(rho=Coeff(0.02, 0.01), mu=Coeff(0.07, 0.03),
                      sigma=Coeff(0.25, 0.2), kappa=-0.4)
    st = build_strategy(rt.HalfFinalTime(), spec, T=1.0)
    v = st.after(np.zeros(3), np.zeros(3), None, None, None)
    assert np.allclose(v, 0.02 / 0.04)
    assert st.label == "log-optimal[half_final]"


def test_cox_rule_constant_and_affine():
    st = build_strategy(rt.CoxTime(intensity="constant", lam0=0.5), SPEC, 1.0)
    pi = float(np.asarray(st.before(np.array(0.3), np.array(1.7), None)))
    a = 0.05 / 0.0625
    b = 0.5 / 0.0625
    assert pi == pytest.approx(solve_quadratic_closed_form(a, b, -0.4).pi,
                               abs=1e-10)
    st2 = build_strategy(rt.CoxTime(intensity="affine-in-|W|", lam0=0.2,
                                    lam1=1.0), SPEC, 1.0)
    w = np.array([-2.0, 0.0, 2.0])
    pis = np.asarray(st2.before(np.zeros(3), w, None))
    assert pis[0] == pytest.approx(pis[2], abs=1e-12)   # |W| symmetry
    assert pis[1] > pis[0]      # higher hazard pushes the fraction down
    for wi, pii in zip(w, pis):
        bb = (0.2 + abs(wi)) / 0.0625
        assert pii == pytest.approx(solve_quadratic_closed_form(a, bb, -0.4).pi,
                                    abs=1e-10)


def test_build_strategy_with_atoms_solves_pointwise():
    spec = MarketSpec(rho=0.02, mu=0.07, sigma=0.25, theta=(0.3,),
                      kappa=-0.4, levy_spec=((0.3, 2.0),))
    st = build_strategy(rt.HalfFinalTime(), spec, T=1.0)
    t = np.array([0.25, 0.5])
    w = np.array([0.4, -1.1])
    pis = np.asarray(st.before(t, w, None))
    for ti, wi, pii in zip(t, w, pis):
        dlt = 1.0 - ti
        Z = float(rt.z_half(wi, dlt))
        ii = OptimalityInputs(excess=0.05, sigma2=0.0625,
                              atoms=((0.3, 2.0),), kappa=-0.4, Z=Z,
                              trace=float(rt.trace_half(wi, dlt)),
                              lam=float(rt.intensity_half(wi, dlt)))
        assert abs(float(before_residual(pii, ii))) < 1e-10
    # the after rule solves the atom condition too
    ia = OptimalityInputs(excess=0.05, sigma2=0.0625, atoms=((0.3, 2.0),))
    va = float(np.asarray(st.after(0.0, np.zeros(2), None, None, None))[0])
    assert abs(float(after_residual(va, ia))) < 1e-10
