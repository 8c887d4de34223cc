"""Defaultable-asset market: exact-in-log simulation of price and wealth.

The price and the controlled wealth are simulated in log space with the
exponential solution of their SDEs; only the time integral of the
coefficients is discretized (left-point rule, matching caglad
integrands).  The default jump multiplies wealth by (1 + pi_F kappa)
where pi_F is the before-default rule in force over the step containing
tau.

Block layout: every estimator walks paths in fixed-size blocks in index
order, so results are byte-identical for any thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .paths import (PathBundle, TimeGrid, brownian_levels_block, sample_jumps)
from .random_times import default_times_block


class AdmissibilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# coefficient specs

@dataclass(frozen=True)
class Coeff:
    """Market coefficient: constant, t-deterministic, or switching at tau.

    before: float, or callable t -> value (vectorized).
    after: None (no switch), float, or callable (t, tau) -> value.
    """

    before: float | Callable
    after: float | Callable | None = None

    def base_values(self, t: np.ndarray):
        return self.before(t) if callable(self.before) else self.before

    def step_values(self, t: np.ndarray, tau: np.ndarray, after_mask: np.ndarray):
        b = self.base_values(t)
        if self.after is None:
            return b
        a = self.after(t, tau[:, None]) if callable(self.after) else self.after
        return np.where(after_mask, a, b)

    def value_at(self, t):
        """Before-branch value at a single time (or array of times)."""
        return self.before(np.asarray(t, dtype=float)) if callable(self.before) \
            else self.before


def as_coeff(c) -> Coeff:
    if isinstance(c, Coeff):
        return c
    return Coeff(before=float(c))


@dataclass(frozen=True)
class MarketSpec:
    """Bond rate rho, risky drift mu / vol sigma, jump coefficients.

    theta aligns with levy_spec atoms; kappa is the default jump size,
    evaluated at tau.  Constant coefficients are validated here; path- or
    time-dependent ones are validated where evaluated.
    """

    rho: Coeff | float = 0.0
    mu: Coeff | float = 0.0
    sigma: Coeff | float = 0.0
    theta: tuple = ()
    kappa: Coeff | float = -0.5
    levy_spec: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "rho", as_coeff(self.rho))
        object.__setattr__(self, "mu", as_coeff(self.mu))
        object.__setattr__(self, "sigma", as_coeff(self.sigma))
        object.__setattr__(self, "kappa", as_coeff(self.kappa))
        object.__setattr__(self, "theta", tuple(as_coeff(c) for c in self.theta))
        if len(self.theta) != len(self.levy_spec):
            raise ValueError("theta must align with levy_spec atoms")
        for c in self.theta:
            if not callable(c.before) and c.before <= -1.0:
                raise ValueError("jump coefficient must exceed -1")
        k = self.kappa
        if not callable(k.before):
            if k.before == 0.0:
                raise ValueError("kappa must be nonzero (no default effect otherwise)")
            if k.before <= -1.0:
                raise ValueError("kappa must exceed -1")

    @property
    def atom_rates(self) -> np.ndarray:
        return np.array([lam for (_z, lam) in self.levy_spec], dtype=float)


@dataclass(frozen=True)
class Strategy:
    """Investment fraction rules; caglad, evaluated at step left endpoints.

    before(t, w, m) and after(t, w, m, tau, w_T) take arrays and
    broadcast; floats are taken as constant rules.  eps is the
    admissibility margin: 1 + pi*theta and 1 + pi*kappa must stay above it.
    """

    before: float | Callable
    after: float | Callable | None = None
    eps: float = 1e-6
    label: str = ""

    def before_values(self, t, w, m):
        if callable(self.before):
            return np.asarray(self.before(t, w, m), dtype=float)
        return np.full_like(w, float(self.before))

    def after_values(self, t, w, m, tau, w_T):
        rule = self.after if self.after is not None else self.before
        if callable(rule):
            return np.asarray(rule(t, w, m, tau, w_T), dtype=float)
        return np.full_like(w, float(rule))


@dataclass(frozen=True)
class WealthPath:
    log_levels: np.ndarray          # ln X_t per grid point, includes ln x0
    default_index: int | None
    x0: float = 1.0

    @property
    def X_T(self) -> float:
        return float(np.exp(self.log_levels[-1]))


@dataclass(frozen=True)
class UtilitySpec:
    variant: str = "log"            # "log" | "power"
    gamma: float = 0.5

    def __post_init__(self):
        if self.variant not in ("log", "power"):
            raise ValueError(f"unknown utility {self.variant!r}")
        if self.variant == "power" and not (0.0 < self.gamma < 1.0):
            raise ValueError("power utility needs gamma in (0,1)")


def utility_value(X_T, u: UtilitySpec):
    x = np.asarray(X_T, dtype=float)
    if u.variant == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(x > 0.0, np.log(np.maximum(x, 1e-300)), -np.inf)
        return out if out.ndim else float(out)
    out = np.where(x >= 0.0, np.abs(x) ** u.gamma / u.gamma, -np.inf)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class MCConfig:
    grid: TimeGrid
    model: object                   # a random-times model
    n_paths: int
    seed: int
    x0: float = 1.0
    block_paths: int = 2048
    threads: int = 1


@dataclass(frozen=True)
class ObjectiveEstimate:
    j: float
    se: float
    before_term: float              # mean of U * 1{tau > T}
    after_term: float               # mean of U * 1{tau <= T}
    n_paths: int
    n_default: int

    def __post_init__(self):
        # partition identity is structural, not statistical
        assert self.j == self.before_term + self.after_term


# ---------------------------------------------------------------------------
# block engine

def _default_grid_index(grid: TimeGrid, tau: np.ndarray) -> np.ndarray:
    """Index k of the grid point at (or right of) tau; n+1 beyond horizon.

    The default jump lands in the wealth increment ending at t_k, i.e. at
    its right endpoint, matching H_t = 1{tau <= t} sampled on the grid.
    """
    with np.errstate(invalid="ignore"):
        k = np.where(np.isfinite(tau) & (tau <= grid.T),
                     np.ceil(tau / grid.dt - 1e-9), grid.n + 1)
    return k.astype(np.int64)


def _collect_jumps(spec: MarketSpec, grid: TimeGrid, seed: int,
                   first_path: int, n_paths: int, tau: np.ndarray):
    """COO lists (row, step, atom) of all events in the block."""
    if not spec.levy_spec:
        return None
    rows, steps, atoms = [], [], []
    for p in range(n_paths):
        forbidden = (tau[p],) if math.isfinite(tau[p]) else ()
        jf = sample_jumps(grid, spec.levy_spec, seed,
                          path_index=first_path + p, forbidden_times=forbidden)
        if jf.times.size:
            rows.append(np.full(jf.times.size, p, dtype=np.int64))
            steps.append(jf.step_index.astype(np.int64))
            atoms.append(jf.mark_atom.astype(np.int64))
    if not rows:
        return (np.empty(0, np.int64),) * 3
    return (np.concatenate(rows), np.concatenate(steps), np.concatenate(atoms))


def _wealth_block(spec: MarketSpec, strategy: Strategy, grid: TimeGrid,
                  levels: np.ndarray, tau: np.ndarray, jumps,
                  want_margins: bool = True):
    """Per-path log-wealth increments and admissibility margins.

    Returns (dlog (B,n), margin_min (B,), margin_argstep (B,)).
    """
    n = grid.n
    dt = grid.dt
    t_left = grid.times()[:-1]
    w_left = levels[:, :-1]
    m_left = np.maximum.accumulate(levels, axis=1)[:, :-1]
    w_T = levels[:, -1]
    dW = np.diff(levels, axis=1)
    after_mask = t_left[None, :] >= tau[:, None]

    pi_b = strategy.before_values(t_left[None, :], w_left, m_left)
    if after_mask.any():
        pi_a = strategy.after_values(t_left[None, :], w_left, m_left,
                                     tau[:, None], w_T[:, None])
        pi = np.where(after_mask, pi_a, pi_b)
    else:
        pi = pi_b

    rho = spec.rho.step_values(t_left, tau, after_mask)
    mu = spec.mu.step_values(t_left, tau, after_mask)
    sig = spec.sigma.step_values(t_left, tau, after_mask)

    drift = rho + pi * (mu - rho) - 0.5 * pi * pi * sig * sig
    margin = np.full(levels.shape[0], np.inf)
    argstep = np.zeros(levels.shape[0], dtype=np.int64)

    def _fold_margin(vals):
        nonlocal margin, argstep
        v = np.broadcast_to(vals, pi.shape)
        step = np.argmin(v, axis=1)
        mn = v[np.arange(v.shape[0]), step]
        take = mn < margin
        argstep = np.where(take, step, argstep)
        margin = np.where(take, mn, margin)

    # compensated jump measure: the -lam*pi*theta rate plus raw event logs
    # reproduces the (ln(1+pi*theta) - pi*theta) expected-growth form
    for j, c in enumerate(spec.theta):
        th = c.step_values(t_left, tau, after_mask)
        lam = spec.levy_spec[j][1]
        arg = 1.0 + pi * th
        if want_margins:
            _fold_margin(arg)
        drift = drift - lam * pi * th

    dlog = drift * dt + pi * sig * dW

    if jumps is not None and jumps[0].size:
        rows, steps, atoms = jumps
        ev = np.zeros(rows.size)
        for j, c in enumerate(spec.theta):
            sel = atoms == j
            if not sel.any():
                continue
            r, s = rows[sel], steps[sel]
            th = c.step_values(t_left[s], tau[r], after_mask[r, s])
            arg = 1.0 + pi[r, s] * th
            ev[sel] = np.log(np.maximum(arg, 1e-300))
        np.add.at(dlog, (rows, steps), ev)

    # default jump: uses the before-rule in force over the step containing tau
    k = _default_grid_index(grid, tau)
    hit = k <= n
    if hit.any():
        r = np.nonzero(hit)[0]
        js = np.clip(k[r] - 1, 0, n - 1)
        kap = spec.kappa.value_at(tau[r])
        arg = 1.0 + pi_b[r, js] * kap
        if want_margins:
            mn = np.asarray(arg, dtype=float)
            upd = margin[r] > mn
            margin[r] = np.where(upd, mn, margin[r])
            argstep[r] = np.where(upd, js, argstep[r])
        dlog[r, js] += np.log(np.maximum(arg, 1e-300))

    return dlog, margin, argstep, pi


# ---------------------------------------------------------------------------
# public operations

def simulate_asset(spec: MarketSpec, bundle: PathBundle, tau: float,
                   s0: float = 1.0) -> np.ndarray:
    """Price levels on the grid; exact exponential form in log space."""
    grid = bundle.grid
    n = grid.n
    dt = grid.dt
    t_left = grid.times()[:-1]
    tau_arr = np.array([tau], dtype=float)
    after_mask = t_left[None, :] >= tau_arr[:, None]
    mu = np.broadcast_to(spec.mu.step_values(t_left, tau_arr, after_mask), (1, n))
    sig = np.broadcast_to(spec.sigma.step_values(t_left, tau_arr, after_mask), (1, n))
    drift = mu - 0.5 * sig * sig
    for j, c in enumerate(spec.theta):
        th = np.broadcast_to(c.step_values(t_left, tau_arr, after_mask), (1, n))
        if np.any(1.0 + th <= 0.0):
            raise AdmissibilityError("jump coefficient at or below -1")
        lam = spec.levy_spec[j][1]
        drift = drift - lam * th
    dlog = drift * dt + sig * np.diff(bundle.brownian.levels)[None, :]
    dlog = dlog[0].copy()
    for i, atom in zip(bundle.jumps.step_index, bundle.jumps.mark_atom):
        c = spec.theta[int(atom)]
        t_i = t_left[int(i)]
        th = c.step_values(np.array([t_i]), tau_arr,
                           np.array([[t_i >= tau]]))
        th = float(np.asarray(th).ravel()[0])
        if 1.0 + th <= 0.0:
            raise AdmissibilityError("jump coefficient at or below -1")
        dlog[int(i)] += math.log1p(th)
    if math.isfinite(tau) and tau <= grid.T:
        kap = float(np.asarray(spec.kappa.value_at(tau)).ravel()[0])
        if 1.0 + kap <= 0.0:
            raise AdmissibilityError("default jump at or below -1")
        k = int(_default_grid_index(grid, np.array([tau]))[0])
        dlog[min(max(k - 1, 0), n - 1)] += math.log1p(kap)
    out = np.empty(n + 1)
    out[0] = 0.0
    np.cumsum(dlog, out=out[1:])
    return s0 * np.exp(out)


def simulate_wealth(spec: MarketSpec, strategy: Strategy, bundle: PathBundle,
                    tau: float, x0: float = 1.0) -> WealthPath:
    grid = bundle.grid
    levels = bundle.brownian.levels[None, :]
    tau_arr = np.array([tau], dtype=float)
    jumps = None
    if bundle.jumps.times.size:
        jumps = (np.zeros(bundle.jumps.times.size, np.int64),
                 bundle.jumps.step_index.astype(np.int64),
                 bundle.jumps.mark_atom.astype(np.int64))
    elif spec.levy_spec:
        jumps = (np.empty(0, np.int64),) * 3
    dlog, margin, argstep, _pi = _wealth_block(spec, strategy, grid,
                                               levels, tau_arr, jumps)
    if margin[0] <= strategy.eps:
        raise AdmissibilityError(
            f"admissibility margin {margin[0]:.3g} <= eps {strategy.eps:.3g} "
            f"at step {int(argstep[0])} (t = {argstep[0] * grid.dt:.6g})")
    log_levels = np.empty(grid.n + 1)
    log_levels[0] = 0.0
    np.cumsum(dlog[0], out=log_levels[1:])
    log_levels += math.log(x0)
    k = _default_grid_index(grid, tau_arr)[0]
    return WealthPath(log_levels=log_levels,
                      default_index=int(k) if k <= grid.n else None,
                      x0=x0)


@dataclass(frozen=True)
class AdmissibilityReport:
    ok: bool
    eps: float
    min_margin: float
    violation_step: int | None
    integrability_sample: float


def check_admissibility(strategy: Strategy, spec: MarketSpec,
                        bundle: PathBundle, tau: float = math.inf
                        ) -> AdmissibilityReport:
    grid = bundle.grid
    levels = bundle.brownian.levels[None, :]
    tau_arr = np.array([tau], dtype=float)
    jumps = None
    if spec.levy_spec:
        jumps = (np.zeros(bundle.jumps.times.size, np.int64),
                 bundle.jumps.step_index.astype(np.int64),
                 bundle.jumps.mark_atom.astype(np.int64))
    dlog, margin, argstep, pi = _wealth_block(spec, strategy, grid,
                                              levels, tau_arr, jumps)
    t_left = grid.times()[:-1]
    after_mask = t_left[None, :] >= tau_arr[:, None]
    rho = np.broadcast_to(spec.rho.step_values(t_left, tau_arr, after_mask), pi.shape)
    mu = np.broadcast_to(spec.mu.step_values(t_left, tau_arr, after_mask), pi.shape)
    sig = np.broadcast_to(spec.sigma.step_values(t_left, tau_arr, after_mask), pi.shape)
    integrand = np.abs(rho) + np.abs(pi * (mu - rho)) + pi * pi * sig * sig
    for j, c in enumerate(spec.theta):
        th = np.broadcast_to(c.step_values(t_left, tau_arr, after_mask), pi.shape)
        lam = spec.levy_spec[j][1]
        arg = np.maximum(1.0 + pi * th, 1e-300)
        integrand = integrand + lam * np.square(np.log(arg))
    sample = float(np.sum(integrand[0]) * grid.dt)
    ok = bool(margin[0] > strategy.eps)
    return AdmissibilityReport(ok=ok, eps=strategy.eps,
                               min_margin=float(margin[0]),
                               violation_step=None if ok else int(argstep[0]),
                               integrability_sample=sample)


def _objective_block(spec, strategy, u, mc, first, count):
    grid = mc.grid
    levels = brownian_levels_block(grid, mc.seed, first, count)
    tau = default_times_block(mc.model, grid, levels, first)
    jumps = _collect_jumps(spec, grid, mc.seed, first, count, tau)
    dlog, margin, _argstep, _pi = _wealth_block(spec, strategy, grid,
                                                levels, tau, jumps)
    bad = int(np.sum(margin <= strategy.eps))
    acc = np.sum(dlog, axis=1)
    if u.variant == "log":
        U = acc + math.log(mc.x0)
    else:
        U = np.exp(u.gamma * (acc + math.log(mc.x0))) / u.gamma
    dead = np.isfinite(tau) & (tau <= grid.T)
    s_before = float(np.sum(np.where(dead, 0.0, U)))
    s_after = float(np.sum(np.where(dead, U, 0.0)))
    s_sq = float(np.sum(U * U))
    return (s_before, s_after, s_sq, int(np.sum(dead)), bad,
            float(U.min()), float(U.max()))


def estimate_objective(spec: MarketSpec, strategy: Strategy, u: UtilitySpec,
                       mc: MCConfig) -> ObjectiveEstimate:
    """MC objective with its exact before/after-default split."""
    if mc.n_paths < 2:
        raise ValueError("need at least 2 paths")
    starts = list(range(0, mc.n_paths, mc.block_paths))
    blocks = [(s, min(mc.block_paths, mc.n_paths - s)) for s in starts]
    if mc.threads > 1:
        with ThreadPoolExecutor(max_workers=mc.threads) as ex:
            results = list(ex.map(
                lambda b: _objective_block(spec, strategy, u, mc, *b), blocks))
    else:
        results = [_objective_block(spec, strategy, u, mc, *b) for b in blocks]
    # ordered reduction: identical totals for any thread count
    s_before = s_after = s_sq = 0.0
    n_default = n_bad = 0
    u_min, u_max = math.inf, -math.inf
    for b, a, q, d, bad, mn, mx in results:
        s_before += b
        s_after += a
        s_sq += q
        n_default += d
        n_bad += bad
        u_min = min(u_min, mn)
        u_max = max(u_max, mx)
    if n_bad:
        raise AdmissibilityError(f"{n_bad} of {mc.n_paths} paths violate the "
                                 f"admissibility margin")
    n = mc.n_paths
    before_term = s_before / n
    after_term = s_after / n
    j = before_term + after_term
    if u_min == u_max:      # deterministic sample: no rounding residue
        var = 0.0
    else:
        var = max(s_sq / n - j * j, 0.0) * n / (n - 1)
    return ObjectiveEstimate(j=j, se=math.sqrt(var / n),
                             before_term=before_term, after_term=after_term,
                             n_paths=n, n_default=n_default)
