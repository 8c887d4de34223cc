"""Coefficient algebra for a compensated single-atom jump measure.

With one atom z0 of rate lam the mark space is one-dimensional: the
orthonormal mark polynomial is the scalar p1 = sgn(z0)/sqrt(lam), and
every expansion kernel is a product of p1-weighted cell indicators over
a fixed partition of [0, T].  Multiple integrals over disjoint cells
multiply, and within a cell they are the monic Charlier family
C_{n+1} = (X - n) C_n - n a C_{n-1} in the centered count X of the cell
(a = control mass).  Ordinary products are expanded by iterating the
first-order product rule, whose two contraction terms - the diagonal
product and the integrated pairing - are the single-atom forms of the
kernel contractions appearing in the general product formula.

Basis element B_n (n a cell-occupation tuple) has squared norm
prod_c n_c! |cell_c|^{n_c}; the lam-dependence sits in p1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson as poisson_dist

from .chaos import IdentityReport, NormVsMC
from .rng import TAG_CHAOS, uniform_block

__all__ = [
    "PoissonBasis", "PoissonVector", "make_poisson_basis", "ntilde",
    "poisson_norm_vs_mc", "poisson_single_atom_check", "poisson_wick",
    "tudor_product", "window_derivative_integral",
]


@dataclass(frozen=True)
class PoissonBasis:
    z0: float
    lam: float
    T: float
    edges: tuple              # partition 0 = t_0 < ... < t_C = T
    order: int                # retained expansion order

    @property
    def p1(self) -> float:
        return math.copysign(1.0, self.z0) / math.sqrt(self.lam)

    @property
    def cells(self) -> tuple:
        return tuple(b - a for a, b in zip(self.edges, self.edges[1:]))

    @property
    def masses(self) -> tuple:
        return tuple(self.lam * w for w in self.cells)


def make_poisson_basis(z0: float, lam: float, T: float = 1.0,
                       breaks: tuple = (), order: int = 6) -> PoissonBasis:
    if not lam > 0.0:
        raise ValueError("rate must be positive")
    if z0 == 0.0:
        raise ValueError("atom must be nonzero")
    if not T > 0.0 or order < 1:
        raise ValueError("need T > 0 and order >= 1")
    bs = tuple(sorted(set(float(b) for b in breaks)))
    if bs and not (0.0 < bs[0] and bs[-1] < T):
        raise ValueError("breaks must lie strictly inside (0, T)")
    return PoissonBasis(z0=float(z0), lam=float(lam), T=float(T),
                        edges=(0.0,) + bs + (float(T),), order=order)


@dataclass
class PoissonVector:
    coeff: dict               # occupation tuple -> coefficient
    basis: PoissonBasis
    tail: float = 0.0

    def get(self, n: tuple) -> float:
        return self.coeff.get(tuple(n), 0.0)

    def mean(self) -> float:
        zero = (0,) * (len(self.basis.edges) - 1)
        return self.coeff.get(zero, 0.0)

    def norm2(self) -> float:
        cells = self.basis.cells
        out = 0.0
        for n, v in self.coeff.items():
            w = 1.0
            for nc, mc in zip(n, cells):
                w *= math.factorial(nc) * mc ** nc
            out += w * v * v
        return out

    def plus(self, other: "PoissonVector", scale: float = 1.0
             ) -> "PoissonVector":
        out = dict(self.coeff)
        for n, v in other.coeff.items():
            out[n] = out.get(n, 0.0) + scale * v
        return PoissonVector(out, self.basis,
                             self.tail + scale * scale * other.tail)

    def max_coeff_diff(self, other: "PoissonVector") -> float:
        keys = set(self.coeff) | set(other.coeff)
        if not keys:
            return 0.0
        return max(abs(self.get(n) - other.get(n)) for n in keys)


def _cell_range(basis: PoissonBasis, s: float, t: float) -> range:
    edges = basis.edges
    try:
        i = next(j for j, e in enumerate(edges) if abs(e - s) < 1e-12)
        k = next(j for j, e in enumerate(edges) if abs(e - t) < 1e-12)
    except StopIteration:
        raise ValueError("window endpoints must sit on partition edges")
    if not i < k:
        raise ValueError("empty window")
    return range(i, k)


def ntilde(basis: PoissonBasis, s: float = 0.0, t: float | None = None
           ) -> PoissonVector:
    """Compensated count of the window (s, t] on the occupation basis."""
    if t is None:
        t = basis.T
    c = len(basis.edges) - 1
    scale = math.copysign(math.sqrt(basis.lam), basis.z0)   # 1/p1
    coeff = {}
    for i in _cell_range(basis, s, t):
        n = [0] * c
        n[i] = 1
        coeff[tuple(n)] = scale
    return PoissonVector(coeff, basis)


def _split(acc: dict, basis: PoissonBasis, tail_in: float) -> PoissonVector:
    keep, dropped = {}, 0.0
    cells = basis.cells
    for n, v in acc.items():
        if v == 0.0:
            continue
        if sum(n) <= basis.order:
            keep[n] = v
        else:
            w = 1.0
            for nc, mc in zip(n, cells):
                w *= math.factorial(nc) * mc ** nc
            dropped += w * v * v
    return PoissonVector(keep, basis, tail_in + dropped)


def _xpoly(n: int, a: float) -> list:
    """C_n as coefficients in powers of the centered count."""
    p0, p1 = [1.0], [0.0, 1.0]
    if n == 0:
        return p0
    for j in range(1, n):
        # C_{j+1} = (X - j) C_j - j a C_{j-1}
        nxt = [0.0] * (j + 2)
        for d, c in enumerate(p1):
            nxt[d + 1] += c
            nxt[d] -= j * c
        for d, c in enumerate(p0):
            nxt[d] -= j * a * c
        p0, p1 = p1, nxt
    return p1


def _x_times(vec: dict, a: float) -> dict:
    # multiply a Charlier series by X via X C_n = C_{n+1} + n C_n + n a C_{n-1}
    out: dict = {}
    for n, v in vec.items():
        out[n + 1] = out.get(n + 1, 0.0) + v
        if n:
            out[n] = out.get(n, 0.0) + n * v
            out[n - 1] = out.get(n - 1, 0.0) + n * a * v
    return out


def _cell_product(m: int, n: int, a: float) -> dict:
    """C_m * C_n as a Charlier series, by Horner in the X-multiplication."""
    if m == 0:
        return {n: 1.0}
    if n == 0:
        return {m: 1.0}
    b = _xpoly(min(m, n), a)
    base = max(m, n)
    res: dict = {}
    for coef in reversed(b):
        res = _x_times(res, a)
        if coef:
            res[base] = res.get(base, 0.0) + coef
    return res


def _check_same_basis(F: PoissonVector, G: PoissonVector) -> None:
    if F.basis is not G.basis and F.basis != G.basis:
        raise ValueError("operands live on different bases")


def tudor_product(F: PoissonVector, G: PoissonVector) -> PoissonVector:
    """Ordinary product; cellwise Charlier linearization, cells independent."""
    _check_same_basis(F, G)
    basis = F.basis
    masses = basis.masses
    p1 = basis.p1
    acc: dict = {}
    for nf, vf in F.coeff.items():
        for ng, vg in G.coeff.items():
            states = [((), vf * vg)]
            for i, (mi, ni) in enumerate(zip(nf, ng)):
                d = _cell_product(mi, ni, masses[i])
                # each degree dropped from m+n pairs one more mark factor
                states = [(idx + (deg,), w * c * p1 ** (mi + ni - deg))
                          for idx, w in states for deg, c in d.items()]
            for idx, w in states:
                acc[idx] = acc.get(idx, 0.0) + w
    return _split(acc, basis, F.tail + G.tail)


def poisson_wick(F: PoissonVector, G: PoissonVector) -> PoissonVector:
    """Occupation-tuple addition; the compensated analogue of index
    addition, so means multiply exactly."""
    _check_same_basis(F, G)
    acc: dict = {}
    for nf, vf in F.coeff.items():
        for ng, vg in G.coeff.items():
            key = tuple(a + b for a, b in zip(nf, ng))
            acc[key] = acc.get(key, 0.0) + vf * vg
    return _split(acc, F.basis, F.tail + G.tail)


def _lower(F: PoissonVector, i: int) -> PoissonVector:
    # difference operator at a point of cell i (mark fixed at the atom):
    # B_n -> p1 * n_i * B_{n - e_i}
    out: dict = {}
    p1 = F.basis.p1
    for n, v in F.coeff.items():
        if n[i]:
            key = tuple(c - (j == i) for j, c in enumerate(n))
            out[key] = out.get(key, 0.0) + v * n[i] * p1
    return PoissonVector(out, F.basis, F.tail)


def _shift(F: PoissonVector, i: int, scale: float) -> PoissonVector:
    out = {}
    for n, v in F.coeff.items():
        key = tuple(c + (j == i) for j, c in enumerate(n))
        out[key] = v * scale
    return _split(out, F.basis, F.tail)


def window_derivative_integral(F: PoissonVector, s: float, t: float
                               ) -> PoissonVector:
    """Difference operator integrated against the control measure."""
    basis = F.basis
    out = PoissonVector({}, basis)
    for i in _cell_range(basis, s, t):
        out = out.plus(_lower(F, i), basis.masses[i])
    return out


def _preset_vector(preset, basis: PoissonBasis) -> PoissonVector:
    zero = (0,) * (len(basis.edges) - 1)
    if isinstance(preset, tuple) and preset and preset[0] == "const":
        return PoissonVector({zero: float(preset[1])}, basis)
    if isinstance(preset, tuple) and preset and preset[0] == "ntilde_power":
        p = int(preset[1])
        if not 1 <= p <= 3:
            raise ValueError("unsupported power (need 1..3)")
        out = ntilde(basis)
        for _ in range(p - 1):
            out = tudor_product(out, ntilde(basis))
        return out
    raise ValueError(f"unsupported preset {preset!r}")


def poisson_single_atom_check(preset, window: tuple, nu: tuple,
                              T: float = 1.0, order: int = 6
                              ) -> IdentityReport:
    """Residual of F * dN~ = wick-integral of (F + DF) + control-measure
    integral of DF, over the given window, coefficientwise.

    nu is the jump measure as ((atom, rate),); more than one atom is out
    of scope for this kernel.
    """
    if len(nu) != 1:
        raise ValueError("unsupported jump measure: single atom only")
    z0, lam = nu[0]
    s, t = float(window[0]), float(window[1])
    if not 0.0 <= s < t <= T:
        raise ValueError("window must satisfy 0 <= s < t <= T")
    breaks = tuple(b for b in (s, t) if 0.0 < b < T)
    basis = make_poisson_basis(z0=z0, lam=lam, T=T, breaks=breaks,
                               order=order)
    F = _preset_vector(preset, basis)
    lhs = tudor_product(F, ntilde(basis, s, t))
    rhs = window_derivative_integral(F, s, t)
    scale = math.copysign(math.sqrt(lam), z0)               # 1/p1
    for i in _cell_range(basis, s, t):
        rhs = rhs.plus(_shift(F.plus(_lower(F, i)), i, scale))
    return IdentityReport(label=f"{preset!r}[{s:g},{t:g}]",
                          residual=lhs.max_coeff_diff(rhs),
                          tail=lhs.tail + rhs.tail)


def _evaluate(F: PoissonVector, counts: np.ndarray) -> np.ndarray:
    basis = F.basis
    masses = basis.masses
    centered = counts - np.asarray(masses)
    # per-cell Charlier columns up to the needed degree
    cols = []
    top = max((max(n) for n in F.coeff), default=0)
    for i in range(centered.shape[1]):
        x = centered[:, i]
        col = [np.ones_like(x), x.copy()]
        for j in range(1, top):
            col.append((x - j) * col[j] - j * masses[i] * col[j - 1])
        cols.append(col)
    out = np.zeros(centered.shape[0])
    for n, v in F.coeff.items():
        term = np.full(centered.shape[0], v * basis.p1 ** sum(n))
        for i, d in enumerate(n):
            if d:
                term = term * cols[i][d]
        out += term
    return out


def poisson_norm_vs_mc(preset, basis: PoissonBasis, n_samples: int = 400_000,
                       seed: int = 0) -> NormVsMC:
    """Coefficient norm against the Monte Carlo second moment.

    The cell counts are drawn exactly (Poisson quantile of tagged
    uniforms), so presets expand exactly and the 3-SE comparison is
    strict."""
    F = _preset_vector(preset, basis)
    n_cells = len(basis.edges) - 1
    u = uniform_block(seed, TAG_CHAOS, 0, n_samples, n_cells)
    counts = np.column_stack([poisson_dist.ppf(u[:, i], basis.masses[i])
                              for i in range(n_cells)])
    sq = _evaluate(F, counts) ** 2
    mc = float(np.mean(sq))
    se = float(np.std(sq) / math.sqrt(n_samples))
    return NormVsMC(label=repr(preset), norm2=F.norm2(), mc_value=mc,
                    mc_se=se, deficit=F.tail, n_samples=n_samples, seed=seed)
