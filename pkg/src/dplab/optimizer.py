"""Pointwise first-order-condition solvers for the log-utility problem.

Three entry points:

* solve_after_default — root of the adapted-coefficient optimality
  condition mu - rho - pi sigma^2 - sum_j lam_j pi theta_j^2/(1+pi theta_j) = 0.
* solve_quadratic_closed_form — the no-atom fixed point
  pi = a + b kappa / (1 + pi kappa), solved in closed form.
* solve_before_default — the pre-default condition with the survival
  weight Z, the conditional trace of the survival indicator, and the
  default-intensity slot; refuses models without an intensity.

build_strategy assembles both rules into a market.Strategy, wiring in
the closed-form state functionals of the chosen default-time model.
Every solve returns a residual certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import random_times as rt
from .market import MarketSpec, Strategy


class NoInteriorOptimum(RuntimeError):
    """No sign change of the residual inside the admissible interval."""


class NoAdmissibleOptimum(RuntimeError):
    """The model fails the intensity hypothesis; no optimal rule exists."""


@dataclass(frozen=True)
class OptimalityInputs:
    """State of the optimality condition at one (t, path) point.

    lam is the density of the decrease of Z (so lam/Z is the default
    intensity of the survival indicator); trace is the conditional
    Malliavin trace of 1{tau > s}.  kappa = None drops the default-jump
    constraint and term (after-default solving).
    """

    excess: float                   # mu - rho
    sigma2: float
    atoms: tuple = ()               # ((theta_j, lam_j), ...)
    kappa: float | None = None
    Z: float = 1.0
    trace: float = 0.0
    lam: float = 0.0
    intensity_hypothesis: bool = True

    def __post_init__(self):
        if self.sigma2 < 0.0:
            raise ValueError("sigma2 must be nonnegative")
        if self.sigma2 == 0.0 and not self.atoms:
            raise ValueError("degenerate condition: sigma2 = 0 and no atoms")
        if self.Z <= 0.0:
            raise ValueError("survival weight must be positive")
        if self.kappa is not None and (self.kappa == 0.0 or self.kappa <= -1.0):
            raise ValueError("kappa must be nonzero and exceed -1")


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-12
    max_iter: int = 200
    bracket_limit: float = 1e8
    eps: float = 1e-6               # admissibility margin shrinking the interval

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class SolveResult:
    pi: float
    residual: float
    iterations: int = 0

    def __float__(self):
        return self.pi


# ---------------------------------------------------------------------------
# residuals (vectorized over pi)

def after_residual(pi, inputs: OptimalityInputs):
    pi = np.asarray(pi, dtype=float)
    r = inputs.excess - pi * inputs.sigma2
    for th, lam in inputs.atoms:
        r = r - lam * pi * th * th / (1.0 + pi * th)
    return r


def before_residual(pi, inputs: OptimalityInputs):
    pi = np.asarray(pi, dtype=float)
    r = inputs.excess - pi * inputs.sigma2
    tz = inputs.trace / inputs.Z
    sig = math.sqrt(inputs.sigma2)
    r = r + tz * sig
    for th, lam in inputs.atoms:
        r = r - lam * pi * th * th / (1.0 + pi * th)
        r = r + tz * lam * th / (1.0 + pi * th)
    if inputs.kappa is not None:
        k = inputs.kappa
        r = r + (k / (1.0 + pi * k)) * inputs.lam / inputs.Z
    return r


def _interval(inputs: OptimalityInputs, eps: float,
              with_kappa: bool) -> tuple[float, float]:
    lo, hi = -math.inf, math.inf
    coefs = [th for th, _lam in inputs.atoms]
    if with_kappa and inputs.kappa is not None:
        coefs.append(inputs.kappa)
    for c in coefs:
        if c > 0.0:
            lo = max(lo, (eps - 1.0) / c)
        elif c < 0.0:
            hi = min(hi, (eps - 1.0) / c)
    return lo, hi


def _scalar_root(fn, inputs, config: SolverConfig, with_kappa: bool,
                 err_cls) -> SolveResult:
    lo, hi = _interval(inputs, config.eps, with_kappa)
    # finite sides sit at the eps-shrunk admissibility boundary; infinite
    # sides are expanded by doubling until the residual changes sign
    a = lo
    if not math.isfinite(lo):
        a = -1.0
        while float(fn(a, inputs)) < 0.0:
            a *= 2.0
            if abs(a) > config.bracket_limit:
                raise err_cls(f"no sign change down to {a:g}; residual "
                              f"{float(fn(a, inputs)):.3g} at the boundary")
    b = hi
    if not math.isfinite(hi):
        b = 1.0
        while float(fn(b, inputs)) > 0.0:
            b *= 2.0
            if abs(b) > config.bracket_limit:
                raise err_cls(f"no sign change up to {b:g}; residual "
                              f"{float(fn(b, inputs)):.3g} at the boundary")
    fa, fb = float(fn(a, inputs)), float(fn(b, inputs))
    if fa < 0.0 or fb > 0.0:
        raise err_cls(f"no interior sign change on [{a:.3g}, {b:.3g}]: "
                      f"residuals ({fa:.3g}, {fb:.3g})")
    it = 0
    for it in range(config.max_iter):
        m = 0.5 * (a + b)
        if m <= a or m >= b:    # interval collapsed to adjacent floats
            break
        fm = float(fn(m, inputs))
        if fm > 0.0:
            a, fa = m, fm
        else:
            b, fb = m, fm
    cand = min((a, fa), (b, fb), key=lambda p: abs(p[1]))
    pi, res = cand
    return SolveResult(pi=float(pi), residual=float(res), iterations=it + 1)


def solve_after_default(inputs: OptimalityInputs,
                        config: SolverConfig = SolverConfig()) -> SolveResult:
    """Unique root of the adapted after-default condition."""
    out = _scalar_root(after_residual, inputs, config, with_kappa=True,
                       err_cls=NoInteriorOptimum)
    if abs(out.residual) > config.tol:
        raise NoInteriorOptimum(f"residual {out.residual:.3g} above tolerance")
    return out


def solve_quadratic_closed_form(a: float, b: float, kappa: float,
                                tol: float = 1e-12) -> SolveResult:
    """Positive-branch solution of pi = a + b*kappa/(1 + pi*kappa)."""
    if kappa == 0.0:
        raise ValueError("kappa must be nonzero; use the plain ratio instead")
    if b < 0.0:
        raise ValueError("b must be nonnegative")
    disc = (1.0 + a * kappa) ** 2 + 4.0 * b * kappa * kappa
    pi = (a * kappa - 1.0 + math.sqrt(disc)) / (2.0 * kappa)
    # with b = 0 and 1 + a*kappa <= 0 the branch collapses onto the
    # admissibility boundary -1/kappa; refuse before dividing by it
    if 1.0 + pi * kappa <= 0.0:
        raise NoInteriorOptimum("closed-form root violates 1 + pi*kappa > 0")
    # a couple of Newton steps clean up the last bits of rounding
    it = 0
    for it in range(8):
        denom = 1.0 + pi * kappa
        f = pi - a - b * kappa / denom
        if abs(f) < tol:
            break
        fp = 1.0 + b * kappa * kappa / (denom * denom)
        pi = pi - f / fp
    denom = 1.0 + pi * kappa
    res = pi - a - b * kappa / denom
    if denom <= 0.0:
        raise NoInteriorOptimum("closed-form root violates 1 + pi*kappa > 0")
    return SolveResult(pi=float(pi), residual=float(res), iterations=it + 1)


def solve_before_default(inputs: OptimalityInputs,
                         config: SolverConfig = SolverConfig()) -> SolveResult:
    """Root of the pre-default optimality condition.

    Requires the model's intensity hypothesis: without it the necessity
    direction of the optimality theory leaves nothing to solve.
    """
    if not inputs.intensity_hypothesis:
        raise NoAdmissibleOptimum(
            "model admits no intensity: the pre-default optimality condition "
            "has no admissible solution")
    out = _scalar_root(before_residual, inputs, config, with_kappa=True,
                       err_cls=NoInteriorOptimum)
    if abs(out.residual) > config.tol:
        raise NoInteriorOptimum(f"residual {out.residual:.3g} above tolerance")
    return out


# ---------------------------------------------------------------------------
# vectorized closed-form paths used by build_strategy (no atoms)

def _quadratic_vec(a, b, kappa):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    disc = (1.0 + a * kappa) ** 2 + 4.0 * b * kappa * kappa
    pi = (a * kappa - 1.0 + np.sqrt(disc)) / (2.0 * kappa)
    for _ in range(3):
        denom = 1.0 + pi * kappa
        f = pi - a - b * kappa / denom
        fp = 1.0 + b * kappa * kappa / (denom * denom)
        pi = pi - f / fp
    return pi


def _constant(c, name: str) -> float:
    if callable(c.before):
        raise ValueError(f"build_strategy needs a constant {name}")
    return float(c.before)


def _after_constant(c, name: str) -> float:
    if c.after is None:
        return _constant(c, name)
    if callable(c.after):
        raise ValueError(f"build_strategy needs a constant after-default {name}")
    return float(c.after)


def build_strategy(model, spec: MarketSpec, T: float,
                   config: SolverConfig = SolverConfig()) -> Strategy:
    """Optimal log-utility rules for the given model and market horizon.

    The before-default rule feeds the model's closed-form survival
    functionals into the pre-default condition.  The after-default rule
    is the adapted-coefficient specialization: the anticipating noise
    terms have zero conditional expectation there, so the root depends
    only on the after-default coefficients, not on tau or the path.
    """
    cls = rt.classify(model)
    if not cls.intensity_hypothesis:
        raise NoAdmissibleOptimum(
            f"{model.name}: no intensity exists; the pre-default condition "
            f"is unsolvable")
    horizon = float(T)

    rho_b = _constant(spec.rho, "rho")
    mu_b = _constant(spec.mu, "mu")
    sig_b = _constant(spec.sigma, "sigma")
    rho_a = _after_constant(spec.rho, "rho")
    mu_a = _after_constant(spec.mu, "mu")
    sig_a = _after_constant(spec.sigma, "sigma")
    kap = _constant(spec.kappa, "kappa")
    th_b = tuple((_constant(c, "theta"), lam)
                 for c, (_z, lam) in zip(spec.theta, spec.levy_spec))
    th_a = tuple((_after_constant(c, "theta"), lam)
                 for c, (_z, lam) in zip(spec.theta, spec.levy_spec))
    if kap == 0.0 or kap <= -1.0:
        raise ValueError("kappa must be nonzero and exceed -1")

    def before(t, w, m):
        t = np.asarray(t, dtype=float)
        w = np.asarray(w, dtype=float)
        dlt = np.maximum(horizon - t, 1e-300)
        if model.name == "half_final":
            Z = rt.z_half(w, dlt)
            with np.errstate(divide="ignore", invalid="ignore"):
                tz = rt.trace_half(w, dlt) / Z
                lam_over_z = rt.intensity_half(w, dlt) / Z
            # deep tail: ratio of underflowed terms; exact r->inf limits.
            # survival there is < 1e-190, so these cells are only ever the
            # masked post-default part of a wealth grid
            r = np.abs(w) / np.sqrt(dlt)
            tz = np.where(r > 30.0, -w / dlt, tz)
            lam_over_z = np.where(r > 30.0, 1.0 / dlt, lam_over_z)
        elif model.name == "cox":
            lam_path = model.lam0 + (model.lam1 * np.abs(w)
                                     if model.intensity == "affine-in-|W|" else 0.0)
            tz = np.zeros_like(w)
            lam_over_z = lam_path + np.zeros_like(w)
        else:   # pragma: no cover - classify() refused above
            raise NoAdmissibleOptimum(model.name)
        if not th_b:
            a = (mu_b - rho_b) / sig_b ** 2 + tz / sig_b
            b = lam_over_z / sig_b ** 2
            return _quadratic_vec(a, b, kap)
        out = np.empty(np.broadcast(t, w).shape)
        it = np.nditer([np.broadcast_to(tz, out.shape),
                        np.broadcast_to(lam_over_z, out.shape)],
                       flags=["multi_index"])
        for tzi, li in it:
            ii = OptimalityInputs(excess=mu_b - rho_b, sigma2=sig_b ** 2,
                                  atoms=th_b, kappa=kap, Z=1.0,
                                  trace=float(tzi), lam=float(li))
            out[it.multi_index] = solve_before_default(ii, config).pi
        return out

    if not th_a:
        pi_after = (mu_a - rho_a) / sig_a ** 2
    else:
        ii = OptimalityInputs(excess=mu_a - rho_a, sigma2=sig_a ** 2,
                              atoms=th_a, kappa=None)
        pi_after = solve_after_default(ii, config).pi

    def after(t, w, m, tau, w_T):
        return pi_after + np.zeros(np.broadcast(t, w).shape)

    return Strategy(before=before, after=after, eps=config.eps,
                    label=f"log-optimal[{model.name}]")
