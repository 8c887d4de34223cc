import math

import pytest

from dplab.poisson_chaos import (
    PoissonVector,
    make_poisson_basis,
    ntilde,
    poisson_norm_vs_mc,
    poisson_single_atom_check,
    poisson_wick,
    tudor_product,
    window_derivative_integral,
)

LAM, Z0, T = 1.3, -0.25, 0.8
A = LAM * T                       # compensator mass of the full window


def test_basis_validation():
    with pytest.raises(ValueError):
        make_poisson_basis(z0=Z0, lam=0.0, T=T)
    with pytest.raises(ValueError):
        make_poisson_basis(z0=0.0, lam=LAM, T=T)
    with pytest.raises(ValueError):
        make_poisson_basis(z0=Z0, lam=LAM, T=T, breaks=(0.9,))
    b = make_poisson_basis(z0=Z0, lam=LAM, T=T, breaks=(0.3,))
    assert b.edges == (0.0, 0.3, T)


def test_counting_moments_match_oracles():
    # central Poisson moments: E = 0, lamT, lamT, lamT + 3 (lamT)^2
    b = make_poisson_basis(z0=Z0, lam=LAM, T=T)
    n = ntilde(b)
    assert n.mean() == 0.0
    assert n.norm2() == pytest.approx(A, rel=1e-14)
    sq = tudor_product(n, n)
    assert sq.mean() == pytest.approx(A, rel=1e-14)
    cube = tudor_product(sq, n)
    assert cube.mean() == pytest.approx(A, rel=1e-13)
    fourth = tudor_product(sq, sq)
    assert fourth.mean() == pytest.approx(A + 3.0 * A * A, rel=1e-13)
    # second-moment identity seen as a norm: ||N~^2||^2 = E[N~^4]
    assert sq.norm2() == pytest.approx(A + 3.0 * A * A, rel=1e-13)


def test_square_expansion_coefficients():
    # N~^2 = lam B_2 + sgn(z0) sqrt(lam) B_1 + lamT on the orthogonal family
    b = make_poisson_basis(z0=Z0, lam=LAM, T=T)
    sq = tudor_product(ntilde(b), ntilde(b))
    assert sq.get((2,)) == pytest.approx(LAM, rel=1e-14)
    assert sq.get((1,)) == pytest.approx(-math.sqrt(LAM), rel=1e-14)
    assert sq.mean() == pytest.approx(A, rel=1e-14)


def test_wick_is_index_addition():
    b = make_poisson_basis(z0=Z0, lam=LAM, T=T)
    n = ntilde(b)
    w = poisson_wick(n, n)
    assert w.mean() == 0.0
    assert w.get((1,)) == 0.0
    assert w.get((2,)) == pytest.approx(LAM, rel=1e-14)
    const = PoissonVector({(0,): 0.7}, b)
    assert poisson_wick(const, n).get((1,)) == pytest.approx(
        0.7 * n.get((1,)), rel=1e-15)


def test_window_second_moment():
    b = make_poisson_basis(z0=Z0, lam=LAM, T=T, breaks=(0.3, 0.6))
    nw = ntilde(b, 0.3, 0.6)
    assert tudor_product(nw, nw).mean() == pytest.approx(LAM * 0.3, rel=1e-14)


def test_derivative_window_integral():
    # D N~ = 1, so the window integral of D against the control measure is
    # the compensator mass of the window
    b = make_poisson_basis(z0=Z0, lam=LAM, T=T, breaks=(0.3,))
    d = window_derivative_integral(ntilde(b), 0.0, T)
    assert d.mean() == pytest.approx(A, rel=1e-14)
    d2 = window_derivative_integral(ntilde(b), 0.3, T)
    assert d2.mean() == pytest.approx(LAM * (T - 0.3), rel=1e-14)


def test_single_atom_identity_checks():
    nu = ((Z0, LAM),)
    for preset in (("const", 2.0), ("ntilde_power", 1), ("ntilde_power", 2)):
        rep = poisson_single_atom_check(preset, (0.0, T), nu, T=T)
        assert rep.residual <= 1e-12, rep
        rep2 = poisson_single_atom_check(preset, (0.3, 0.6), nu, T=T)
        assert rep2.residual <= 1e-12, rep2


def test_multi_atom_refused():
    with pytest.raises(ValueError, match="unsupported"):
        poisson_single_atom_check(("const", 1.0), (0.0, 1.0),
                                  ((0.4, 1.0), (-0.2, 2.0)), T=1.0)
    with pytest.raises(ValueError, match="unsupported"):
        poisson_single_atom_check(("cube_root", 1), (0.0, 1.0),
                                  ((Z0, LAM),), T=1.0)


def test_norm_vs_mc_poisson():
    b = make_poisson_basis(z0=Z0, lam=LAM, T=T)
    chk = poisson_norm_vs_mc(("ntilde_power", 1), b, n_samples=200_000,
                             seed=3)
    assert chk.norm2 == pytest.approx(A, rel=1e-14)
    assert abs(chk.mc_value - chk.norm2) < 3.0 * chk.mc_se

    chk2 = poisson_norm_vs_mc(("ntilde_power", 2), b, n_samples=200_000,
                              seed=3)
    assert chk2.norm2 == pytest.approx(A + 3.0 * A * A, rel=1e-13)
    assert abs(chk2.mc_value - chk2.norm2) < 3.0 * chk2.mc_se

    again = poisson_norm_vs_mc(("ntilde_power", 1), b, n_samples=200_000,
                               seed=3)
    assert again.mc_value == chk.mc_value
