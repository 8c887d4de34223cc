import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dplab.chaos import (
    ChaosVector,
    MultiIndex,
    basis_orthonormality,
    chaos_of,
    forward_decomposition_check,
    hermite_function,
    hermite_poly,
    make_basis,
    malliavin_derivative,
    norm_vs_mc,
    pointwise_product,
    skorohod_integral,
    wick_identity_check,
    wick_product,
    window_coeffs,
)

# independent quadrature oracles (scipy adaptive quad on the physicists'
# H_n evaluation), frozen before the module was written
C1, C2, C3 = 0.6426813372174754, 0.4179635669137218, -0.18984403342495984
C10, C50 = 0.12004514583616274, 0.04776804393125093
SUM_C2 = 0.9389294075666179          # captured variance of the unit window
TAIL = 0.06107059243338209           # = 1 - SUM_C2
S_MID = {0.25: 1.0473665053454235,   # partial sums of the window derivative
         0.5: 0.9850697488784697,
         0.75: 1.0491930372897191}
CW_MASS, CW1, CW5 = 0.5416220543131404, 0.3728464905427309, -0.05404715102857022

CFG = make_basis()                   # K = 50, Q = 4, T = 1


def _single(cfg, alpha, value=1.0):
    return ChaosVector(coeff={alpha: value}, K=cfg.K, Q=cfg.Q)


def test_hermite_poly_values():
    for x in (-1.3, 0.0, 2.0):
        assert hermite_poly(0, x) == 1.0
        assert hermite_poly(1, x) == x
    assert hermite_poly(2, 2.0) == pytest.approx(3.0, rel=1e-15)
    assert hermite_poly(3, 2.0) == pytest.approx(2.0, rel=1e-15)
    x = 1.7
    assert hermite_poly(4, x) == pytest.approx(x ** 4 - 6 * x * x + 3, rel=1e-14)
    with pytest.raises(ValueError):
        hermite_poly(-1, 0.0)


def test_hermite_function_values():
    assert hermite_function(1, 0.0) == pytest.approx(math.pi ** -0.25, rel=1e-15)
    assert hermite_function(2, 0.0) == 0.0
    # explicit k = 3 form against the recurrence path
    x = 0.7
    want = math.pi ** -0.25 / math.sqrt(2.0) * math.exp(-0.5 * x * x) \
        * (2.0 * x * x - 1.0)
    assert hermite_function(3, x) == pytest.approx(want, rel=1e-13)
    assert hermite_function(7, np.array([0.1, 0.4])).shape == (2,)
    with pytest.raises(ValueError):
        hermite_function(0, 0.0)


def test_basis_orthonormality():
    assert basis_orthonormality(CFG.K) < 1e-8


def test_window_coeffs_against_quadrature_oracles():
    c = window_coeffs(CFG, 0.0, 1.0)
    assert c.shape == (50,)
    for k, want in ((1, C1), (2, C2), (3, C3), (10, C10), (50, C50)):
        assert c[k - 1] == pytest.approx(want, abs=1e-12)
    assert float(c @ c) == pytest.approx(SUM_C2, abs=1e-12)
    cw = window_coeffs(CFG, 0.3, 0.9)
    assert float(cw @ cw) == pytest.approx(CW_MASS, abs=1e-12)
    assert cw[0] == pytest.approx(CW1, abs=1e-12)
    assert cw[4] == pytest.approx(CW5, abs=1e-12)
    with pytest.raises(ValueError):
        window_coeffs(CFG, 0.5, 0.4)


def test_multi_index_arithmetic():
    a = MultiIndex.make({1: 3, 4: 2})
    assert a.order() == 5
    assert a.factorial() == 12
    assert a.degree(4) == 2 and a.degree(7) == 0
    b = a.plus(MultiIndex.unit(4))
    assert b.degree(4) == 3
    assert b.minus_unit(1).degree(1) == 2
    assert MultiIndex.unit(2).minus_unit(2) == MultiIndex.make({})


def test_chaos_of_presets():
    th = chaos_of(("theta", 1), CFG)
    assert th.coeff == {MultiIndex.unit(1): 1.0}
    assert th.norm2() == 1.0

    h2 = chaos_of(("hermite", 2, 1), CFG)
    assert h2.coeff == {MultiIndex.make({1: 2}): 1.0}
    assert h2.norm2() == 2.0          # alpha! = 2

    w = chaos_of("W_T", CFG)
    assert w.mean() == 0.0
    assert w.norm2() == pytest.approx(SUM_C2, abs=1e-12)
    assert w.tail == pytest.approx(TAIL, abs=1e-12)

    with pytest.raises(ValueError, match="order"):
        chaos_of(("hermite", 5, 1), CFG)
    with pytest.raises(ValueError, match="unsupported"):
        chaos_of("S_T", CFG)


def test_pointwise_product_linearization():
    th = chaos_of(("theta", 1), CFG)
    sq = pointwise_product(th, th)
    # h_1^2 = h_2 + 1
    assert sq.get(MultiIndex.make({})) == pytest.approx(1.0, rel=1e-15)
    assert sq.get(MultiIndex.make({1: 2})) == pytest.approx(1.0, rel=1e-15)

    h2 = chaos_of(("hermite", 2, 1), CFG)
    p = pointwise_product(h2, h2)    # h_2^2 = h_4 + 4 h_2 + 2
    assert p.get(MultiIndex.make({})) == pytest.approx(2.0, rel=1e-15)
    assert p.get(MultiIndex.make({1: 2})) == pytest.approx(4.0, rel=1e-15)
    assert p.get(MultiIndex.make({1: 4})) == pytest.approx(1.0, rel=1e-15)
    assert p.tail == 0.0

    # truncation is split out, not silently lost: at Q = 2 the h_4 term
    # carries 4! * 1^2 of discarded squared mass
    small = make_basis(K=4, Q=2)
    ps = pointwise_product(chaos_of(("hermite", 2, 1), small),
                           chaos_of(("hermite", 2, 1), small))
    assert ps.get(MultiIndex.make({1: 4})) == 0.0
    assert ps.tail == pytest.approx(24.0, rel=1e-15)

    # independent components multiply without cross linearization
    mix = pointwise_product(chaos_of(("theta", 1), CFG),
                            chaos_of(("theta", 2), CFG))
    assert mix.coeff == {MultiIndex.make({1: 1, 2: 1}): 1.0}

    w = chaos_of("W_T", CFG)
    wsq = pointwise_product(w, w)
    # truncated-window isometry: E[(sum c_k theta_k)^2] = sum c_k^2
    assert wsq.mean() == pytest.approx(SUM_C2, abs=1e-13)


def test_wick_product_is_index_addition():
    one = chaos_of(("hermite", 0, 1), CFG)
    th = chaos_of(("theta", 1), CFG)
    assert wick_product(th, one).coeff == th.coeff
    ww = wick_product(th, th)
    assert ww.coeff == {MultiIndex.make({1: 2}): 1.0}

    f = ChaosVector(coeff={MultiIndex.make({}): 0.7,
                           MultiIndex.unit(1): 0.3,
                           MultiIndex.make({2: 2}): -0.2},
                    K=CFG.K, Q=CFG.Q)
    g = ChaosVector(coeff={MultiIndex.make({}): -1.1,
                           MultiIndex.unit(2): 0.4},
                    K=CFG.K, Q=CFG.Q)
    # the empty coefficient multiplies exactly: E[F wick G] = E[F] E[G]
    assert wick_product(f, g).mean() == 0.7 * -1.1


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_wick_mean_multiplicative_property(a0, a1, b0, b1):
    f = ChaosVector(coeff={MultiIndex.make({}): a0, MultiIndex.unit(1): a1},
                    K=CFG.K, Q=CFG.Q)
    g = ChaosVector(coeff={MultiIndex.make({}): b0, MultiIndex.unit(3): b1},
                    K=CFG.K, Q=CFG.Q)
    assert wick_product(f, g).mean() == a0 * b0


def test_malliavin_derivative():
    th = chaos_of(("theta", 1), CFG)
    d = malliavin_derivative(th, 0.4)
    assert d.coeff == {MultiIndex.make({}): hermite_function(1, 0.4)}

    w = chaos_of("W_T", CFG)
    for t, want in S_MID.items():
        # partial sums of the window indicator: within 5% of 1 mid-window
        assert malliavin_derivative(w, t).mean() == pytest.approx(want,
                                                                  abs=1e-12)

    h2 = chaos_of(("hermite", 2, 1), CFG)
    d2 = malliavin_derivative(h2, 0.25)
    assert d2.coeff == {MultiIndex.unit(1):
                        pytest.approx(2.0 * hermite_function(1, 0.25),
                                      rel=1e-14)}


def test_skorohod_integral_presets():
    w = chaos_of("W_T", CFG)
    one = chaos_of(("hermite", 0, 1), CFG)
    s1 = skorohod_integral(lambda t: one, CFG)
    assert s1.max_coeff_diff(w) < 1e-10

    s2 = skorohod_integral(lambda t: w, CFG)
    assert s2.max_coeff_diff(wick_product(w, w)) < 1e-10

    # list-of-nodes form must agree with the callable form
    s3 = skorohod_integral([w for _ in CFG.nodes], CFG)
    assert s3.max_coeff_diff(s2) == 0.0


def test_wick_identity_full_and_sub_window():
    w = chaos_of("W_T", CFG)
    rep = wick_identity_check(w, 0.0, 1.0, CFG)
    assert rep.residual <= 1e-12

    const = ChaosVector(coeff={MultiIndex.make({}): 2.5}, K=CFG.K, Q=CFG.Q)
    assert wick_identity_check(const, 0.0, 1.0, CFG).residual <= 1e-12

    h2 = chaos_of(("hermite", 2, 1), CFG)
    rep2 = wick_identity_check(h2, 0.3, 0.9, CFG)
    assert rep2.residual <= 1e-12
    assert rep2.tail >= 0.0


def test_forward_decomposition_adapted_and_terminal():
    rep = forward_decomposition_check(("adapted_step", 8), CFG)
    assert rep.residual <= 1e-12
    # adaptedness kills the trace in the limit; at finite K what is left
    # is the overlap of the indicator projection errors at the window
    # boundaries, bounded by Cauchy-Schwarz from the measured deficits
    m = 8
    bound = 0.0
    for j in range(1, m):
        tj = CFG.T * j / m
        c = window_coeffs(CFG, 0.0, tj)
        bound += math.sqrt(max(tj - float(c @ c), 0.0)) \
            * math.sqrt(CFG.T / m)
    assert 0.0 < abs(rep.trace_mean) < bound

    rep2 = forward_decomposition_check("terminal", CFG)
    assert rep2.residual <= 1e-12
    # forward minus Skorohod equals the derivative window mass: the horizon
    # up to the documented basis tail
    assert rep2.trace_mean == pytest.approx(SUM_C2, abs=1e-10)
    assert abs(rep2.trace_mean - CFG.T) < 0.062

    with pytest.raises(ValueError, match="unsupported"):
        forward_decomposition_check("argmax_indicator", CFG)


def test_norm_vs_mc_bridge():
    chk = norm_vs_mc(("hermite", 2, 1), CFG, n_samples=200_000, seed=7)
    assert chk.norm2 == 2.0
    assert chk.deficit == 0.0
    assert abs(chk.mc_value - chk.norm2) < 3.0 * chk.mc_se

    chk2 = norm_vs_mc("W_T", CFG, n_samples=200_000, seed=7)
    assert chk2.deficit == pytest.approx(TAIL, abs=1e-12)
    assert abs(chk2.mc_value - chk2.norm2) < 3.0 * chk2.mc_se

    prod = norm_vs_mc(("product", ("theta", 1), ("theta", 2)), CFG,
                      n_samples=200_000, seed=7)
    assert prod.norm2 == pytest.approx(1.0, rel=1e-14)
    assert abs(prod.mc_value - prod.norm2) < 3.0 * prod.mc_se

    again = norm_vs_mc("W_T", CFG, n_samples=200_000, seed=7)
    assert again.mc_value == chk2.mc_value
