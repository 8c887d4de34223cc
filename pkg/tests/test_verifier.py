import math

import numpy as np
import pytest

from dplab.market import MarketSpec, MCConfig, Strategy, UtilitySpec, \
    estimate_objective
from dplab.optimizer import build_strategy
from dplab.paths import TimeGrid
from dplab.random_times import ArgmaxTime, CoxTime, HalfFinalTime
from dplab.verifier import (FEATURE_NAMES, compensator_singularity_probe,
                            forward_vs_ito, gateaux_derivative,
                            g_drift_regression, ito_formula_check,
                            martingale_residual, objective_difference)

U = UtilitySpec("log")
MERTON = MarketSpec(rho=0.02, mu=0.07, sigma=0.25, kappa=-0.4)
NEVER = CoxTime(intensity="constant", lam0=0.0)     # kappa stays inert


def _mc(n=64, paths=4000, seed=9, model=NEVER, **kw):
    return MCConfig(grid=TimeGrid(T=1.0, n=n), model=model,
                    n_paths=paths, seed=seed, **kw)


def test_merton_log_identities():
    # log utility, no jumps: the objective is quadratic in the shift, so the
    # central differences are exact path by path up to float cancellation
    # (~1e-16 / delta^2 per path)
    g = gateaux_derivative(MERTON, Strategy(before=0.8), 1.0, U, _mc())
    assert g.second_value == pytest.approx(-0.25 ** 2, abs=1e-9)
    assert g.second_se < 1e-9
    assert g.fd_value == pytest.approx(g.psi_value, abs=1e-9)
    # 0.8 solves the condition: the derivative is statistical zero
    assert abs(g.psi_value) < 3.0 * g.psi_se
    assert not g.richardson and g.delta == 1e-3


def test_richardson_merton_unchanged():
    # both resolutions are exact here and the weights sum to one
    g = gateaux_derivative(MERTON, Strategy(before=0.8), 1.0, U, _mc(),
                           richardson=True)
    assert g.richardson
    assert g.second_value == pytest.approx(-0.0625, abs=1e-10)
    assert g.second_se < 1e-9
    with pytest.raises(ValueError, match="even"):
        gateaux_derivative(MERTON, Strategy(before=0.8), 1.0, U, _mc(n=63),
                           richardson=True)


def test_delta_halving_near_margin():
    spec = MarketSpec(rho=0.0, mu=0.05, sigma=0.2, theta=(-0.5,),
                      kappa=-0.1, levy_spec=((1.0, 0.5),))
    mc = _mc(n=16, paths=500, model=CoxTime(lam0=0.3))
    g = gateaux_derivative(spec, Strategy(before=1.999), 1.0, U, mc)
    # pi + delta = 2.0 kills the jump margin; one halving clears it
    assert g.delta == 5e-4


def test_objective_difference_is_paired():
    spec = MERTON
    mc = _mc(n=128, paths=20_000, model=CoxTime(lam0=0.5, barrier_seed=3))
    a, b = Strategy(before=0.8), Strategy(before=0.3)
    od = objective_difference(spec, a, b, U, mc)
    ja = estimate_objective(spec, a, U, mc)
    jb = estimate_objective(spec, b, U, mc)
    # same paths, different accumulation order: agreement to the last few ulp
    assert od.j_a == pytest.approx(ja.j, abs=1e-13)
    assert od.j_b == pytest.approx(jb.j, abs=1e-13)
    assert od.diff == pytest.approx(ja.j - jb.j, abs=1e-13)
    # shared paths cancel the default-timing noise, but the Brownian
    # exposure gap (0.5 sigma W) and the jump-size gap at default survive
    # the pairing: the gain is real yet bounded (measured ratio ~0.61)
    assert od.diff_se < 0.75 * math.hypot(ja.se, jb.se)
    p_def = 1.0 - math.exp(-0.5)
    want = (0.5 * 0.05 - (0.64 - 0.09) * 0.0625 / 2.0) \
        + (math.log1p(-0.32) - math.log1p(-0.12)) * p_def
    assert abs(od.diff - want) < 4.0 * od.diff_se


def test_objective_difference_inadmissible():
    mc = _mc(n=32, paths=200, model=HalfFinalTime())
    with pytest.raises(ValueError):
        objective_difference(MERTON, Strategy(before=0.5),
                             Strategy(before=2.6), U, mc)


def test_martingale_residual_structure_and_separation():
    # the built rule zeroes the pre-default condition exactly, but its
    # constant post-default leg ignores the information drift the
    # last-crossing time leaves behind, so the W column stays significant
    # after defaults accumulate (and the terminal bucket carries the
    # sqrt(dt) discrete-hazard layer).  The report must flag that honestly,
    # and a deliberate mis-allocation must look strictly worse on top.
    st = build_strategy(HalfFinalTime(), MERTON, T=1.0)
    mc = _mc(n=256, paths=10_000, seed=5, model=HalfFinalTime())
    edges = np.linspace(0.0, 1.0, 9)
    rep = martingale_residual(MERTON, st, U, edges, mc)
    assert rep.features == FEATURE_NAMES
    assert len(rep.coefficients) == 8
    # at t=0 the W, M, H, age columns carry no variation and are dropped
    assert rep.coefficients[0]["W"] is None
    assert rep.coefficients[0]["const"] is not None
    assert not rep.all_within(3.0), f"worst t {rep.worst_t:.2f}"
    # log utility: the change-of-measure weight is identically one
    assert rep.weight_max == pytest.approx(1.0, abs=1e-12)
    assert rep.weight_mean == pytest.approx(1.0, abs=1e-12)

    shifted = Strategy(before=lambda t, w, m: st.before(t, w, m) + 0.5,
                       after=lambda t, w, m, tau, w_T:
                       st.after(t, w, m, tau, w_T) + 0.5,
                       eps=st.eps)
    rep2 = martingale_residual(MERTON, shifted, U, edges, mc)
    assert rep2.worst_t > rep.worst_t
    assert not rep2.all_within(3.0)
    with pytest.raises(ValueError, match="partition"):
        martingale_residual(MERTON, st, U, np.array([0.1, 1.0]), mc)


def test_forward_vs_ito_exact_presets():
    mc = _mc(n=64, paths=2000)
    tab = forward_vs_ito("const", mc, eps_steps=(1, 2, 7, 16))
    by_eps = {round(r.eps * 64): r for r in tab.rows}
    assert by_eps[7].note == "window does not divide the grid"
    assert math.isnan(by_eps[7].rms_diff)
    for k in (1, 2, 16):
        assert by_eps[k].rms_diff < 1e-13
    assert math.isnan(tab.slope)
    assert tab.anticipating_mean == 0.0 and tab.anticipating_se == 0.0

    tw = forward_vs_ito("terminal-W", mc, eps_steps=(1, 2, 4))
    # every window of the frozen terminal integrand sums to W_T^2, and the
    # anticipating value subtracts the T correction path by path
    assert tw.anticipating_mean == pytest.approx(1.0, abs=1e-12)
    assert tw.anticipating_se < 1e-12


def test_forward_vs_ito_adapted_slope():
    mc = _mc(n=256, paths=4000)
    tab = forward_vs_ito("linear-W", mc, eps_steps=(2, 4, 8, 16, 32))
    assert 0.3 < tab.slope < 0.8
    with pytest.raises(ValueError):
        forward_vs_ito("cubic", mc)


def test_ito_formula_check_refinement():
    spec = MarketSpec(rho=0.0, mu=0.06, sigma=0.3, kappa=-0.4)
    mc = _mc(n=128, paths=32, model=CoxTime(lam0=0.8, barrier_seed=2))
    chk = ito_formula_check(spec, "exp", mc)
    assert chk.max_dev_refined < chk.max_dev
    # mu = lam * theta cancels the compensator: the path is piecewise
    # constant between events and sequential application is exact
    spec0 = MarketSpec(rho=0.0, mu=0.8, sigma=0.0, theta=(0.4,),
                       kappa=-0.4, levy_spec=((0.4, 2.0),))
    chk0 = ito_formula_check(spec0, "square", mc, refine_factor=None)
    assert chk0.max_dev < 1e-12
    assert chk0.max_dev_refined is None
    with pytest.raises(ValueError):
        ito_formula_check(spec, "cube", mc)


def test_psi_fd_agree_with_jumps_and_default():
    spec = MarketSpec(rho=0.02, mu=0.07, sigma=0.25, theta=(0.3,),
                      kappa=-0.4, levy_spec=((0.3, 2.0),))
    mc = _mc(n=128, paths=4000, model=HalfFinalTime())
    g = gateaux_derivative(spec, Strategy(before=0.5), 1.0, U, mc)
    # no longer quadratic in the shift: agreement is O(delta^2)
    assert abs(g.psi_value - g.fd_value) < 1e-4


def test_drift_regression_smoke():
    mc = _mc(n=2048, paths=10_000, seed=11, model=HalfFinalTime(),
             block_paths=4096)
    rep = g_drift_regression(HalfFinalTime(), mc)
    assert rep.before is not None and rep.after is not None
    # coarse grid and few paths: wide sanity band only
    assert 0.5 < rep.before.slope < 1.3
    assert 0.5 < rep.after.slope < 1.3
    assert rep.before.n_pairs > 10_000
    lo, hi = rep.before.slope_ci3
    assert lo < rep.before.slope < hi


def test_singularity_probe_smoke_and_validation():
    with pytest.raises(ValueError):
        compensator_singularity_probe(CoxTime(), _mc(n=256, paths=100))
    mc = _mc(n=512, paths=2000, seed=3, model=ArgmaxTime())
    rep = compensator_singularity_probe(ArgmaxTime(), mc,
                                        localtime_grids=(256, 512),
                                        localtime_paths=400, n_probes=4)
    assert rep.containment_violations == 0
    assert rep.n_windows > 0
    assert rep.invz_mean > 0.0
    assert math.isfinite(rep.localtime_slope)
