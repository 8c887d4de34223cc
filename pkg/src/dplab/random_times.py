"""Default-time models driven by the Brownian path.

Three models:

* ``CoxTime`` — independent exponential barrier against an integrated
  intensity; the easy baseline (immersion holds, W stays a martingale).
* ``ArgmaxTime`` — the time the path attains its running maximum; honest,
  compensator purely singular (proportional to dM).
* ``HalfFinalTime`` — the last time the path crosses half its terminal
  value; honest with an absolutely continuous compensator.

Closed forms for the survival process Z, the conditional trace of the
survival indicator, the compensator density and the enlarged-filtration
drift of W are provided both as scalar operations (quadrature-backed,
as advertised) and as vectorized helpers used by the solvers.

Two displayed constants from the source example are reproduced verbatim
by the ``*_displayed`` variants but fail their own integral identities;
the primary functions carry the corrected values and the discrepancy is
reported, never silently merged.  See trace_discrepancy().
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import erf, erfc

from . import rng
from .paths import PathBundle, TimeGrid

BEYOND_HORIZON = math.inf

_SQ2PI = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# models

@dataclass(frozen=True)
class CoxTime:
    """tau = inf{t: integrated intensity >= E}, E ~ Exp(1) independent."""

    intensity: str = "constant"     # "constant" | "affine-in-|W|"
    lam0: float = 1.0
    lam1: float = 0.0
    barrier_seed: int = 0

    name = "cox"

    def rate_path(self, grid: TimeGrid, levels: np.ndarray) -> np.ndarray:
        """Left-point intensity per step, shaped like levels[..., :-1]."""
        w = levels[..., :-1]
        if self.intensity == "constant":
            lam = np.full_like(w, self.lam0)
        elif self.intensity == "affine-in-|W|":
            lam = self.lam0 + self.lam1 * np.abs(w)
        else:
            raise ValueError(f"unknown intensity preset {self.intensity!r}")
        if np.any(lam < 0.0):
            raise ValueError("intensity must be nonnegative")
        return lam


@dataclass(frozen=True)
class ArgmaxTime:
    name = "argmax"


@dataclass(frozen=True)
class HalfFinalTime:
    name = "half_final"


MODELS = {"cox": CoxTime, "argmax": ArgmaxTime, "half_final": HalfFinalTime}


@dataclass(frozen=True)
class TimeClassification:
    intensity_hypothesis: bool
    density_hypothesis: bool
    honest: bool
    f_measurable_at_T: bool

    def __post_init__(self):
        if self.density_hypothesis and not self.intensity_hypothesis:
            raise ValueError("density hypothesis implies intensity hypothesis")


@dataclass(frozen=True)
class CompensatorPart:
    """(ac, singular, jump) decomposition of the compensator at one state."""

    ac_density: float
    singular_coefficient: float | None   # coefficient of dM, None if absent
    jump_part: None = None


def classify(model) -> TimeClassification:
    table = {
        "cox": TimeClassification(True, True, False, False),
        "half_final": TimeClassification(True, False, True, True),
        "argmax": TimeClassification(False, False, True, True),
    }
    return table[model.name]


# ---------------------------------------------------------------------------
# vectorized closed forms (x = W_t for half_final, k = M_t - W_t for argmax;
# dlt = T - t)

def z_half(x, dlt):
    # erfc form: algebraically 1 - (erf(r/sqrt 2) - sqrt(2/pi) r e^{-r^2/2})
    # but free of the cancellation that underflows to 0 around r ~ 9
    x = np.asarray(x, dtype=float)
    r = np.abs(x) / np.sqrt(dlt)
    return erfc(r / math.sqrt(2.0)) + _SQ2PI * r * np.exp(-r * r / 2.0)


def trace_half(x, dlt):
    """Conditional trace of the survival indicator (corrected form, = dZ/dx)."""
    x = np.asarray(x, dtype=float)
    return -_SQ2PI * np.sign(x) * x * x * np.exp(-x * x / (2.0 * dlt)) / dlt ** 1.5


def trace_half_displayed(x, dlt):
    """The source example's two-term display; spurious +|x| term retained."""
    x = np.asarray(x, dtype=float)
    return (_SQ2PI * (-np.sign(x) * x * x + np.abs(x))
            * np.exp(-x * x / (2.0 * dlt)) / dlt ** 1.5)


def intensity_half(x, dlt):
    """Density of the decreasing part of Z (corrected: carries sqrt(2/pi))."""
    x = np.asarray(x, dtype=float)
    return _SQ2PI * np.abs(x) * np.exp(-x * x / (2.0 * dlt)) / dlt ** 1.5


def intensity_half_displayed(x, dlt):
    x = np.asarray(x, dtype=float)
    return np.abs(x) * np.exp(-x * x / (2.0 * dlt)) / dlt ** 1.5


def hazard_half(x, dlt):
    """intensity_half / z_half with the exact r -> inf limit in the far tail.

    Both factors underflow past r = |x|/sqrt(dlt) ~ 37; their ratio
    tends to 1/dlt, which is substituted beyond r = 30.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        hz = intensity_half(x, dlt) / z_half(x, dlt)
    r = np.abs(x) / np.sqrt(np.asarray(dlt, dtype=float))
    return np.where(r > 30.0, 1.0 / np.asarray(dlt, dtype=float), hz)


def z_argmax(k, dlt):
    k = np.asarray(k, dtype=float)
    return erfc(k / np.sqrt(2.0 * dlt))


def trace_argmax(k, dlt):
    k = np.asarray(k, dtype=float)
    return 2.0 * np.exp(-k * k / (2.0 * dlt)) / np.sqrt(2.0 * math.pi * dlt)


def drift_before_half(x, dlt):
    # z underflows to exact 0 around |x|/sqrt(dlt) ~ 9 (erf saturates);
    # the resulting inf/nan states are excluded by callers' caps
    with np.errstate(divide="ignore", invalid="ignore"):
        return trace_half(x, dlt) / z_half(x, dlt)


def drift_after_half(x, w_T, dlt):
    """Bridge-to-W_T drift conditioned on no further crossing of W_T/2.

    Singular where the no-crossing factor phi vanishes with W_T != 0
    (the path sits exactly on the level): returns NaN there, callers
    exclude those states.  W_T = 0 uses the limit convention (the
    W_T/phi term drops).
    """
    x = np.asarray(x, dtype=float)
    w_T = np.asarray(w_T, dtype=float)
    bridge = (w_T - x) / dlt
    expo = (2.0 * x * w_T - w_T * w_T) / (2.0 * dlt)
    with np.errstate(over="ignore"):
        phi = 1.0 - np.exp(expo)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(w_T == 0.0, 0.0, w_T / (dlt * phi))
    out = bridge - term
    return np.where((phi == 0.0) & (w_T != 0.0), np.nan, out)


def phi_after_half(x, w_T, dlt):
    """No-crossing factor; |phi| near 0 marks the singular states."""
    x = np.asarray(x, dtype=float)
    w_T = np.asarray(w_T, dtype=float)
    with np.errstate(over="ignore"):
        return 1.0 - np.exp((2.0 * x * w_T - w_T * w_T) / (2.0 * dlt))


# ---------------------------------------------------------------------------
# batch default-time sampling

def default_times_block(model, grid: TimeGrid, levels: np.ndarray,
                        first_path: int = 0) -> np.ndarray:
    """tau per path (grid times, or inf beyond horizon) for a level block."""
    n = grid.n
    dt = grid.dt
    if model.name == "argmax":
        idx = np.argmax(levels, axis=1)          # first index on ties
        return idx * dt
    if model.name == "half_final":
        d = levels - levels[:, -1:] / 2.0
        cross = d[:, :-1] * d[:, 1:] <= 0.0
        last = n - 1 - np.argmax(cross[:, ::-1], axis=1)
        has = cross[np.arange(levels.shape[0]), last]
        tau = (last + 1) * dt
        # W_T = 0 exactly never produces no-crossing rows; guard anyway
        return np.where(has, tau, levels[:, -1] * 0.0 + n * dt)
    if model.name == "cox":
        lam = model.rate_path(grid, levels)
        cum = np.cumsum(lam * dt, axis=1)
        u = rng.uniform_block(model.barrier_seed, rng.TAG_BARRIER,
                              first_path, levels.shape[0], 1)[:, 0]
        barrier = -np.log1p(-u)
        hit = cum >= barrier[:, None]
        step = np.argmax(hit, axis=1)
        any_hit = hit[np.arange(levels.shape[0]), -1]
        tau = (step + 1) * dt
        return np.where(any_hit, tau, BEYOND_HORIZON)
    raise ValueError(f"unknown model {model!r}")


def sample_default_time(model, bundle: PathBundle) -> float:
    levels = bundle.brownian.levels[None, :]
    tau = default_times_block(model, bundle.grid, levels,
                              first_path=bundle.path_index)
    return float(tau[0])


# ---------------------------------------------------------------------------
# scalar operations (quadrature-backed where an integral is displayed)

def _grid_index(grid: TimeGrid, t: float) -> int:
    i = int(round(t / grid.dt))
    if not math.isclose(i * grid.dt, t, rel_tol=0.0, abs_tol=1e-9 * grid.T):
        raise ValueError(f"time {t} is not on the grid")
    return i


def _h_quad(x: float) -> float:
    val, _err = integrate.quad(lambda y: _SQ2PI * y * y * math.exp(-y * y / 2.0),
                               0.0, x, epsrel=1e-10, limit=200)
    return val


def azema_Z(model, bundle: PathBundle, t: float) -> float:
    """Survival probability P(tau > t | F_t), evaluated by quadrature."""
    grid = bundle.grid
    if not (0.0 <= t < grid.T):
        raise ValueError("t must lie in [0, T)")
    i = _grid_index(grid, t)
    dlt = grid.T - i * grid.dt
    w = bundle.brownian.levels
    if model.name == "half_final":
        return 1.0 - _h_quad(abs(w[i]) / math.sqrt(dlt))
    if model.name == "argmax":
        k = bundle.brownian.running_max[i] - w[i]
        val, _err = integrate.quad(lambda y: math.exp(-y * y / 2.0),
                                   k / math.sqrt(dlt), math.inf,
                                   epsrel=1e-10, limit=200)
        return 2.0 / math.sqrt(2.0 * math.pi) * val
    if model.name == "cox":
        lam = model.rate_path(grid, w[None, :])[0]
        return float(np.exp(-np.sum(lam[:i] * grid.dt)))
    raise ValueError(f"unknown model {model!r}")


def malliavin_trace_indicator(model, bundle: PathBundle, s: float) -> float:
    """Conditional trace E[D_{s+} 1{tau>s} | F_s] — displayed form.

    For half_final this reproduces the source display verbatim, including
    its spurious +|W| term (it vanishes at W_s = 1); the corrected value
    used by the solvers is trace_half / trace_argmax.
    """
    grid = bundle.grid
    if not (0.0 <= s < grid.T):
        raise ValueError("s must lie in [0, T)")
    i = _grid_index(grid, s)
    dlt = grid.T - i * grid.dt
    w = bundle.brownian.levels
    if model.name == "half_final":
        return float(trace_half_displayed(w[i], dlt))
    if model.name == "argmax":
        k = bundle.brownian.running_max[i] - w[i]
        return float(trace_argmax(k, dlt))
    raise ValueError("trace is unsupported for CoxTime (not terminal-measurable)")


def trace_corrected(model, bundle: PathBundle, s: float) -> float:
    """dZ/dx form of the conditional trace; equals the display for argmax."""
    grid = bundle.grid
    i = _grid_index(grid, s)
    dlt = grid.T - i * grid.dt
    w = bundle.brownian.levels
    if model.name == "half_final":
        return float(trace_half(w[i], dlt))
    if model.name == "argmax":
        k = bundle.brownian.running_max[i] - w[i]
        return float(trace_argmax(k, dlt))
    raise ValueError("trace is unsupported for CoxTime (not terminal-measurable)")


def trace_discrepancy(model, bundle: PathBundle, s: float) -> float:
    """Displayed minus corrected trace; nonzero only for half_final."""
    return malliavin_trace_indicator(model, bundle, s) - trace_corrected(model, bundle, s)


def compensator(model, bundle: PathBundle, s: float,
                displayed: bool = False) -> CompensatorPart:
    grid = bundle.grid
    if not (0.0 <= s < grid.T):
        raise ValueError("s must lie in [0, T)")
    i = _grid_index(grid, s)
    dlt = grid.T - i * grid.dt
    w = bundle.brownian.levels
    if model.name == "half_final":
        fn = intensity_half_displayed if displayed else intensity_half
        return CompensatorPart(ac_density=float(fn(w[i], dlt)),
                               singular_coefficient=None)
    if model.name == "argmax":
        return CompensatorPart(ac_density=0.0,
                               singular_coefficient=_SQ2PI / math.sqrt(dlt))
    if model.name == "cox":
        lam = model.rate_path(grid, w[None, :])[0]
        z = float(np.exp(-np.sum(lam[:i] * grid.dt)))
        # density of the decrease of Z = lam * Z
        return CompensatorPart(ac_density=float(lam[i]) * z,
                               singular_coefficient=None)
    raise ValueError(f"unknown model {model!r}")


def g_drift(model, bundle: PathBundle, s: float, defaulted: bool) -> float:
    """Closed-form drift rate of W under the enlarged filtration."""
    if model.name != "half_final":
        raise ValueError("closed-form drift is published only for half_final")
    grid = bundle.grid
    if not (0.0 <= s < grid.T):
        raise ValueError("s must lie in [0, T)")
    i = _grid_index(grid, s)
    dlt = grid.T - i * grid.dt
    w = bundle.brownian.levels
    if defaulted:
        return float(drift_after_half(w[i], w[-1], dlt))
    return float(drift_before_half(w[i], dlt))
