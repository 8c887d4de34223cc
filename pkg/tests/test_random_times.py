import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs
from scipy.special import erf

import dplab.random_times as rt
from dplab.paths import TimeGrid, brownian_levels_block, sample_bundle

SQ2PI = math.sqrt(2.0 / math.pi)

# frozen oracles: quadrature of the defining integrals, computed once
# independently of the library (see the notes ledger)
Z_ORACLE = {
    (1.0, 1.0): 0.8012519569012008,
    (0.5, 0.8): 0.9576606785525185,
    (-2.0, 0.3): 0.003968500465847846,
    (0.1, 0.9): 0.999689538426709,
    (3.0, 2.0): 0.21229028736013333,
}
TRACE_ORACLE = {
    (1.0, 1.0): -0.4839414485813265,
    (-0.7, 0.4): 0.8376079374539103,
    (0.25, 1.5): -0.026584922041550385,
}
ZARG_ORACLE = {
    (0.8, 0.5): 0.25789903529233954,
    (0.2, 1.0): 0.8414805811217939,
    (2.5, 0.25): 5.733031407040797e-07,
}


def test_z_half_against_quadrature():
    for (x, dlt), val in Z_ORACLE.items():
        assert rt.z_half(x, dlt) == pytest.approx(val, abs=1e-12)


def test_trace_half_against_quadrature():
    # oracle is an FD derivative of the quadrature: 1e-8 is its accuracy
    for (x, dlt), val in TRACE_ORACLE.items():
        assert rt.trace_half(x, dlt) == pytest.approx(val, abs=2e-8)


def test_z_argmax_against_quadrature():
    for (k, dlt), val in ZARG_ORACLE.items():
        assert rt.z_argmax(k, dlt) == pytest.approx(val, rel=1e-10)


def test_erfc_form_identity():
    # the shipped erfc form equals the erf form where the latter is stable
    r = np.linspace(-6.0, 6.0, 241)
    erf_form = 1.0 - (erf(np.abs(r) / math.sqrt(2.0))
                      - SQ2PI * np.abs(r) * np.exp(-r * r / 2.0))
    assert np.max(np.abs(rt.z_half(r, 1.0) - erf_form)) < 1e-14


def test_z_half_far_tail_no_underflow():
    assert rt.z_half(36.0, 1.0) > 0.0
    assert rt.z_half(9.5, 1.0) > 0.0          # erf form dies around here


def test_intensity_pinned_example():
    # displayed vs corrected at W = 1, remaining time 1
    assert rt.intensity_half_displayed(1.0, 1.0) == \
        pytest.approx(0.6065306597126334, abs=1e-15)
    assert rt.intensity_half(1.0, 1.0) == \
        pytest.approx(0.48394144903828673, abs=1e-15)


def test_trace_is_z_derivative():
    xs = np.linspace(-3.0, 3.0, 25)
    h = 1e-6
    for dlt in (0.3, 1.0, 2.5):
        fd = (rt.z_half(xs + h, dlt) - rt.z_half(xs - h, dlt)) / (2.0 * h)
        assert np.allclose(rt.trace_half(xs, dlt), fd, atol=5e-9)


def test_displayed_trace_discrepancy_is_intensity():
    # the spurious +|x| term of the display is exactly the intensity
    xs = np.linspace(-2.0, 2.0, 17)
    d = rt.trace_half_displayed(xs, 0.7) - rt.trace_half(xs, 0.7)
    assert np.allclose(d, rt.intensity_half(xs, 0.7), atol=1e-15)


def test_hazard_half_tail_switch():
    dlt = 0.04
    # continuity at the switch: the exact ratio approaches 1/dlt
    x = 29.0 * math.sqrt(dlt)
    assert rt.hazard_half(x, dlt) == pytest.approx(1.0 / dlt, rel=2e-3)
    x = 31.0 * math.sqrt(dlt)
    assert rt.hazard_half(x, dlt) == 1.0 / dlt
    assert np.isfinite(rt.hazard_half(50.0, dlt))


def test_classify_table():
    assert rt.classify(rt.CoxTime()) == rt.TimeClassification(True, True, False, False)
    assert rt.classify(rt.HalfFinalTime()) == rt.TimeClassification(True, False, True, True)
    c = rt.classify(rt.ArgmaxTime())
    assert not c.intensity_hypothesis and c.honest
    with pytest.raises(ValueError):
        rt.TimeClassification(False, True, True, True)


# ---------------------------------------------------------------------------
# sampled times

GRID = TimeGrid(T=1.0, n=128)


def test_half_final_time_is_last_sign_change():
    levels = brownian_levels_block(GRID, 23, 0, 200)
    tau = rt.default_times_block(rt.HalfFinalTime(), GRID, levels)
    assert np.all((tau > 0.0) & (tau <= GRID.T + 1e-12))
    d = levels - levels[:, -1:] / 2.0
    cross = d[:, :-1] * d[:, 1:] <= 0.0
    idx = np.rint(tau / GRID.dt).astype(int) - 1
    rows = np.arange(200)
    assert np.all(cross[rows, idx])
    # nothing after it
    for p in range(200):
        assert not cross[p, idx[p] + 1:].any()


def test_argmax_time_first_index_on_ties():
    levels = np.array([[0.0, 1.0, 0.5, 1.0, -0.2]])
    g = TimeGrid(T=1.0, n=4)
    tau = rt.default_times_block(rt.ArgmaxTime(), g, levels)
    assert tau[0] == 0.25


def test_cox_time_distribution_and_determinism():
    model = rt.CoxTime(intensity="constant", lam0=1.5, barrier_seed=5)
    levels = brownian_levels_block(GRID, 23, 0, 20_000)
    tau = rt.default_times_block(model, GRID, levels)
    tau2 = rt.default_times_block(model, GRID, levels)
    assert np.array_equal(tau, tau2)
    frac = np.mean(np.isfinite(tau) & (tau <= GRID.T))
    assert frac == pytest.approx(1.0 - math.exp(-1.5), abs=0.01)
    fin = tau[np.isfinite(tau)]
    k = fin / GRID.dt
    assert np.allclose(k, np.rint(k))
    assert np.all(np.isinf(tau[~(np.isfinite(tau))]))


def test_cox_affine_and_validation():
    model = rt.CoxTime(intensity="affine-in-|W|", lam0=0.2, lam1=1.0)
    levels = brownian_levels_block(GRID, 3, 0, 100)
    lam = model.rate_path(GRID, levels)
    assert lam.shape == (100, GRID.n)
    assert np.allclose(lam, 0.2 + np.abs(levels[:, :-1]))
    bad = rt.CoxTime(intensity="affine-in-|W|", lam0=-1.0, lam1=0.0)
    with pytest.raises(ValueError):
        bad.rate_path(GRID, levels)
    with pytest.raises(ValueError):
        rt.CoxTime(intensity="nope").rate_path(GRID, levels)


@given(seed=hs.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_half_final_always_defaults(seed):
    g = TimeGrid(T=1.0, n=32)
    levels = brownian_levels_block(g, seed, 0, 8)
    tau = rt.default_times_block(rt.HalfFinalTime(), g, levels)
    assert np.all(np.isfinite(tau)) and np.all(tau <= g.T + 1e-12)


# ---------------------------------------------------------------------------
# scalar operations on bundles

def _bundle(seed=31):
    return sample_bundle(GRID, (), seed)


def test_azema_Z_matches_vectorized_forms():
    b = _bundle()
    for t in (0.25, 0.5, 0.75):
        i = int(round(t / GRID.dt))
        dlt = GRID.T - t
        w = b.brownian.levels[i]
        assert rt.azema_Z(rt.HalfFinalTime(), b, t) == \
            pytest.approx(float(rt.z_half(w, dlt)), abs=1e-9)
        k = b.brownian.running_max[i] - w
        assert rt.azema_Z(rt.ArgmaxTime(), b, t) == \
            pytest.approx(float(rt.z_argmax(k, dlt)), abs=1e-9)
    with pytest.raises(ValueError):
        rt.azema_Z(rt.HalfFinalTime(), b, 1.0)
    with pytest.raises(ValueError):
        rt.azema_Z(rt.HalfFinalTime(), b, 0.1234)     # off grid


def test_cox_azema_Z_is_exp_integral():
    model = rt.CoxTime(intensity="constant", lam0=2.0)
    b = _bundle()
    assert rt.azema_Z(model, b, 0.5) == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_trace_ops_and_discrepancy():
    b = _bundle()
    s = 0.5
    i = int(round(s / GRID.dt))
    w = b.brownian.levels[i]
    dlt = GRID.T - s
    assert rt.malliavin_trace_indicator(rt.HalfFinalTime(), b, s) == \
        pytest.approx(float(rt.trace_half_displayed(w, dlt)), rel=1e-12)
    assert rt.trace_corrected(rt.HalfFinalTime(), b, s) == \
        pytest.approx(float(rt.trace_half(w, dlt)), rel=1e-12)
    disc = rt.trace_discrepancy(rt.HalfFinalTime(), b, s)
    assert disc == pytest.approx(float(rt.intensity_half(w, dlt)), rel=1e-12)
    # argmax display and corrected agree
    assert rt.trace_discrepancy(rt.ArgmaxTime(), b, s) == 0.0
    with pytest.raises(ValueError):
        rt.malliavin_trace_indicator(rt.CoxTime(), b, s)


def test_compensator_parts():
    b = _bundle()
    s = 0.25
    i = int(round(s / GRID.dt))
    w = b.brownian.levels[i]
    dlt = GRID.T - s
    half = rt.compensator(rt.HalfFinalTime(), b, s)
    assert half.singular_coefficient is None
    assert half.ac_density == pytest.approx(float(rt.intensity_half(w, dlt)))
    disp = rt.compensator(rt.HalfFinalTime(), b, s, displayed=True)
    assert disp.ac_density == pytest.approx(float(rt.intensity_half_displayed(w, dlt)))
    am = rt.compensator(rt.ArgmaxTime(), b, s)
    assert am.ac_density == 0.0
    assert am.singular_coefficient == pytest.approx(SQ2PI / math.sqrt(dlt))
    cox = rt.compensator(rt.CoxTime(lam0=0.7), b, s)
    assert cox.ac_density == pytest.approx(0.7 * math.exp(-0.7 * s), rel=1e-10)


def test_g_drift_scalar_wrappers():
    b = _bundle()
    s = 0.5
    i = int(round(s / GRID.dt))
    w = b.brownian.levels
    dlt = GRID.T - s
    assert rt.g_drift(rt.HalfFinalTime(), b, s, defaulted=False) == \
        pytest.approx(float(rt.drift_before_half(w[i], dlt)))
    assert rt.g_drift(rt.HalfFinalTime(), b, s, defaulted=True) == \
        pytest.approx(float(rt.drift_after_half(w[i], w[-1], dlt)))
    with pytest.raises(ValueError):
        rt.g_drift(rt.ArgmaxTime(), b, s, defaulted=False)


def test_drift_after_half_conventions():
    # w_T = 0: the w_T/phi term drops, leaving the plain bridge drift
    assert rt.drift_after_half(0.5, 0.0, 0.3) == pytest.approx(-0.5 / 0.3)
    # sitting on the level with w_T != 0: singular, flagged as NaN
    assert math.isnan(rt.drift_after_half(0.25, 0.5, 0.3))
    assert rt.phi_after_half(0.25, 0.5, 0.3) == 0.0
    # generic state: finite, and phi matches its definition
    x, wT, dlt = -0.3, 0.8, 0.4
    phi = 1.0 - math.exp((2 * x * wT - wT * wT) / (2 * dlt))
    assert rt.phi_after_half(x, wT, dlt) == pytest.approx(phi, rel=1e-12)
    v = rt.drift_after_half(x, wT, dlt)
    assert v == pytest.approx((wT - x) / dlt - wT / (dlt * phi), rel=1e-12)


def test_hazard_mass_integrates_to_one():
    # E[int lam/Z to tau] = P(default) = 1; grid left-sums land below,
    # shrinking like sqrt(dt) -- generous band at this resolution
    g = TimeGrid(T=1.0, n=2048)
    levels = brownian_levels_block(g, 7, 0, 4000)
    t_left = g.times()[:-1]
    tau = rt.default_times_block(rt.HalfFinalTime(), g, levels)
    hz = rt.hazard_half(levels[:, :-1], (g.T - t_left - 0.5 * g.dt)[None, :])
    alive = t_left[None, :] < tau[:, None]
    mass = float(np.where(alive, hz * g.dt, 0.0).sum(axis=1).mean())
    assert 0.85 < mass < 1.02
