"""Exact coefficient arithmetic on truncated white-noise expansions.

A functional of the driving Brownian noise is stored by its coefficients
on the orthogonal family H_alpha = prod_k h_{alpha_k}(theta_k), where
theta_k is the noise coordinate on the k-th Hermite function and h_n are
the probabilists' Hermite polynomials.  Products, Wick products, the
derivative operator and the integral identities relating forward sums to
their compensated form all reduce to integer-weighted coefficient
algebra, so residual checks can demand 1e-12 while every truncation is
reported, never hidden.

Truncation bookkeeping: a vector carries `tail`, the squared-norm mass
discarded on the way to building it (its inputs' tails included).  It is
an audit accumulator, not an exact remainder norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_legendre

from .rng import TAG_CHAOS, normal_block

__all__ = [
    "BasisConfig", "ChaosVector", "ForwardDecomposition", "IdentityReport",
    "MultiIndex", "NormVsMC", "basis_orthonormality", "chaos_of",
    "forward_decomposition_check", "hermite_function", "hermite_poly",
    "make_basis", "malliavin_derivative", "norm_vs_mc", "pointwise_product",
    "skorohod_integral", "wick_identity_check", "wick_product",
    "window_coeffs",
]


def hermite_poly(n: int, x):
    """Probabilists' h_n by the recurrence h_{n+1} = x h_n - n h_{n-1}."""
    if n < 0:
        raise ValueError("polynomial order must be nonnegative")
    arr = np.asarray(x, dtype=float)
    h0 = np.ones_like(arr)
    if n == 0:
        return float(h0) if arr.ndim == 0 else h0
    h1 = arr.copy()
    for j in range(1, n):
        h0, h1 = h1, arr * h1 - j * h0
    return float(h1) if arr.ndim == 0 else h1


def hermite_function(k: int, t):
    """Orthonormal Hermite function e_k on the real line, 1-based.

    e_{k}(s) = pi^{-1/4} / sqrt((k-1)!) * exp(-s^2/2) * h_{k-1}(sqrt(2) s),
    evaluated through the normalized recurrence to stay stable in k.
    """
    if k < 1:
        raise ValueError("basis index is 1-based")
    arr = np.asarray(t, dtype=float)
    f0 = np.pi ** -0.25 * np.exp(-0.5 * arr * arr)
    if k == 1:
        return float(f0) if arr.ndim == 0 else f0
    f1 = math.sqrt(2.0) * arr * f0
    for n in range(1, k - 1):
        f0, f1 = f1, math.sqrt(2.0 / (n + 1)) * arr * f1 \
            - math.sqrt(n / (n + 1)) * f0
    return float(f1) if arr.ndim == 0 else f1


def _basis_matrix(K: int, x: np.ndarray) -> np.ndarray:
    """(K, len(x)) values of e_1..e_K via the same recurrence, rowwise."""
    out = np.empty((K, x.size))
    out[0] = np.pi ** -0.25 * np.exp(-0.5 * x * x)
    if K > 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for n in range(1, K - 1):
        out[n + 1] = math.sqrt(2.0 / (n + 1)) * x * out[n] \
            - math.sqrt(n / (n + 1)) * out[n - 1]
    return out


def _gl_nodes(a: float, b: float, panels: int, panel_nodes: int):
    x, w = roots_legendre(panel_nodes)
    edges = np.linspace(a, b, panels + 1)
    h = (b - a) / panels
    nodes = ((x + 1.0) * 0.5 * h + edges[:-1, None]).ravel()
    weights = np.broadcast_to(w * 0.5 * h, (panels, panel_nodes)).ravel()
    return nodes, weights.copy()


@dataclass(frozen=True)
class MultiIndex:
    """Finitely supported k -> count mapping, stored as sorted pairs."""
    pairs: tuple = ()

    @staticmethod
    def make(items) -> "MultiIndex":
        d = dict(items)
        return MultiIndex(tuple(sorted((k, c) for k, c in d.items() if c)))

    @staticmethod
    def unit(k: int) -> "MultiIndex":
        return MultiIndex(((k, 1),))

    def order(self) -> int:
        return sum(c for _, c in self.pairs)

    def factorial(self) -> int:
        out = 1
        for _, c in self.pairs:
            out *= math.factorial(c)
        return out

    def degree(self, k: int) -> int:
        for kk, c in self.pairs:
            if kk == k:
                return c
        return 0

    def plus(self, other: "MultiIndex") -> "MultiIndex":
        d = dict(self.pairs)
        for k, c in other.pairs:
            d[k] = d.get(k, 0) + c
        return MultiIndex.make(d)

    def plus_unit(self, k: int) -> "MultiIndex":
        d = dict(self.pairs)
        d[k] = d.get(k, 0) + 1
        return MultiIndex.make(d)

    def minus_unit(self, k: int) -> "MultiIndex":
        d = dict(self.pairs)
        if d.get(k, 0) < 1:
            raise ValueError("component absent from the index")
        d[k] -= 1
        return MultiIndex.make(d)


_EMPTY = MultiIndex()


@dataclass
class ChaosVector:
    coeff: dict
    K: int
    Q: int
    tail: float = 0.0

    def get(self, alpha: MultiIndex) -> float:
        return self.coeff.get(alpha, 0.0)

    def mean(self) -> float:
        return self.coeff.get(_EMPTY, 0.0)

    def norm2(self) -> float:
        return float(sum(a.factorial() * v * v for a, v in self.coeff.items()))

    def scaled(self, c: float) -> "ChaosVector":
        return ChaosVector({a: c * v for a, v in self.coeff.items()},
                           self.K, self.Q, self.tail * c * c)

    def plus(self, other: "ChaosVector", scale: float = 1.0) -> "ChaosVector":
        out = dict(self.coeff)
        for a, v in other.coeff.items():
            out[a] = out.get(a, 0.0) + scale * v
        return ChaosVector(out, self.K, self.Q,
                           self.tail + scale * scale * other.tail)

    def max_coeff_diff(self, other: "ChaosVector") -> float:
        keys = set(self.coeff) | set(other.coeff)
        if not keys:
            return 0.0
        return max(abs(self.get(a) - other.get(a)) for a in keys)


@dataclass(frozen=True, eq=False)
class BasisConfig:
    K: int
    Q: int
    T: float
    nodes: np.ndarray
    weights: np.ndarray
    emat: np.ndarray            # (K, nodes) basis values, cached
    panels: int
    panel_nodes: int


def make_basis(K: int = 50, Q: int = 4, T: float = 1.0,
               panels: int | None = None, panel_nodes: int = 24
               ) -> BasisConfig:
    if K < 1 or Q < 1 or not T > 0.0:
        raise ValueError("need K >= 1, Q >= 1, T > 0")
    if panels is None:
        panels = max(4, -(-K // 6))
    nodes, weights = _gl_nodes(0.0, T, panels, panel_nodes)
    return BasisConfig(K=K, Q=Q, T=T, nodes=nodes, weights=weights,
                       emat=_basis_matrix(K, nodes), panels=panels,
                       panel_nodes=panel_nodes)


def window_coeffs(cfg: BasisConfig, s: float, t: float) -> np.ndarray:
    """<1_(s,t], e_k> for k = 1..K by panel quadrature on the window."""
    if not (0.0 <= s < t <= cfg.T):
        raise ValueError("window must satisfy 0 <= s < t <= T")
    nodes, weights = _gl_nodes(s, t, cfg.panels, cfg.panel_nodes)
    return _basis_matrix(cfg.K, nodes) @ weights


def basis_orthonormality(K: int) -> float:
    """Max deviation of the quadrature Gram matrix from the identity."""
    half = math.sqrt(2.0 * K) + 6.0
    nodes, weights = _gl_nodes(-half, half, panels=int(2 * half) + 1,
                               panel_nodes=24)
    e = _basis_matrix(K, nodes)
    gram = (e * weights) @ e.T
    return float(np.max(np.abs(gram - np.eye(K))))


def _check_compat(F: ChaosVector, G: ChaosVector) -> None:
    if (F.K, F.Q) != (G.K, G.Q):
        raise ValueError("operands live on different truncations")


def _split(acc: dict, K: int, Q: int, tail_in: float) -> ChaosVector:
    keep, dropped = {}, 0.0
    for a, v in acc.items():
        if v == 0.0:
            continue
        if a.order() <= Q:
            keep[a] = v
        else:
            dropped += a.factorial() * v * v
    return ChaosVector(keep, K, Q, tail_in + dropped)


def pointwise_product(F: ChaosVector, G: ChaosVector) -> ChaosVector:
    """Ordinary product via componentwise Hermite linearization.

    h_m h_n = sum_r r! C(m,r) C(n,r) h_{m+n-2r}; independent components
    combine freely.  Mass pushed above order Q lands in `tail`.
    """
    _check_compat(F, G)
    acc: dict = {}
    for a, av in F.coeff.items():
        for b, bv in G.coeff.items():
            states = [({}, av * bv)]
            for k in {kk for kk, _ in a.pairs} | {kk for kk, _ in b.pairs}:
                m, n = a.degree(k), b.degree(k)
                new = []
                for r in range(min(m, n) + 1):
                    w = math.factorial(r) * math.comb(m, r) * math.comb(n, r)
                    for idx, wt in states:
                        nxt = dict(idx)
                        if m + n - 2 * r:
                            nxt[k] = m + n - 2 * r
                        new.append((nxt, wt * w))
                states = new
            for idx, wt in states:
                key = MultiIndex.make(idx)
                acc[key] = acc.get(key, 0.0) + wt
    return _split(acc, F.K, F.Q, F.tail + G.tail)


def wick_product(F: ChaosVector, G: ChaosVector) -> ChaosVector:
    """Coefficient of H_{a+b} accumulates a_a * b_b; pure index addition."""
    _check_compat(F, G)
    acc: dict = {}
    for a, av in F.coeff.items():
        for b, bv in G.coeff.items():
            key = a.plus(b)
            acc[key] = acc.get(key, 0.0) + av * bv
    return _split(acc, F.K, F.Q, F.tail + G.tail)


def malliavin_derivative(F: ChaosVector, t: float) -> ChaosVector:
    """D_t F = sum_a sum_k a_k e_k(t) a_a H_{a - eps(k)}."""
    evals: dict = {}
    out: dict = {}
    for a, av in F.coeff.items():
        for k, c in a.pairs:
            if k not in evals:
                evals[k] = hermite_function(k, float(t))
            key = a.minus_unit(k)
            out[key] = out.get(key, 0.0) + av * c * evals[k]
    return ChaosVector(out, F.K, F.Q, F.tail)


def _malliavin_window(F: ChaosVector, c: np.ndarray) -> ChaosVector:
    # int_window D_u F du, exact given the window coefficients c_k
    out: dict = {}
    for a, av in F.coeff.items():
        for k, cnt in a.pairs:
            key = a.minus_unit(k)
            out[key] = out.get(key, 0.0) + av * cnt * float(c[k - 1])
    return ChaosVector(out, F.K, F.Q, F.tail)


def _first_order(c: np.ndarray, cfg: BasisConfig, tail: float = 0.0
                 ) -> ChaosVector:
    coeff = {MultiIndex.unit(k + 1): float(v)
             for k, v in enumerate(c) if v != 0.0}
    return ChaosVector(coeff, cfg.K, cfg.Q, tail)


def chaos_of(functional, cfg: BasisConfig) -> ChaosVector:
    """Expansion of a preset functional.

    Presets: "W_T"; ("theta", k); ("hermite", n, k) for h_n(theta_k);
    ("stoch_int", coeffs) for the first-order element with the given
    basis coefficients; ("product", p1, p2, ...) for ordinary products
    of presets (linearized, truncation reported).
    """
    if isinstance(functional, str):
        if functional == "W_T":
            c = window_coeffs(cfg, 0.0, cfg.T)
            return _first_order(c, cfg, tail=cfg.T - float(c @ c))
        raise ValueError(f"unsupported functional {functional!r}")
    if isinstance(functional, tuple) and functional:
        kind = functional[0]
        if kind == "theta":
            return chaos_of(("hermite", 1, functional[1]), cfg)
        if kind == "hermite":
            _, n, k = functional
            if not 0 <= n <= cfg.Q:
                raise ValueError("order exceeds the retained truncation")
            if not 1 <= k <= cfg.K:
                raise ValueError("basis index out of range")
            alpha = MultiIndex.make({k: n})
            return ChaosVector({alpha: 1.0}, cfg.K, cfg.Q)
        if kind == "stoch_int":
            c = np.asarray(functional[1], dtype=float)
            if c.ndim != 1 or c.size > cfg.K:
                raise ValueError("need at most K basis coefficients")
            return _first_order(c, cfg)
        if kind == "product":
            parts = [chaos_of(p, cfg) for p in functional[1:]]
            if not parts:
                raise ValueError("empty product")
            out = parts[0]
            for p in parts[1:]:
                out = pointwise_product(out, p)
            return out
    raise ValueError(f"unsupported functional {functional!r}")


def skorohod_integral(Y, cfg: BasisConfig) -> ChaosVector:
    """Quadrature of Y_t against the truncated singular white noise.

    Y is either a callable t -> ChaosVector or a sequence aligned with
    cfg.nodes.  Each node contributes w_i * (Y_i wick W_noise(t_i)), with
    W_noise(t) = sum_k e_k(t) H_{eps(k)}.
    """
    if callable(Y):
        vectors = [Y(float(t)) for t in cfg.nodes]
    else:
        vectors = list(Y)
        if len(vectors) != cfg.nodes.size:
            raise ValueError("need one vector per quadrature node")
    profiles: dict = {}          # alpha -> accumulated k-profile
    tail_in = 0.0
    for i, v in enumerate(vectors):
        wi = float(cfg.weights[i])
        tail_in += wi * v.tail
        col = cfg.emat[:, i]
        for a, av in v.coeff.items():
            arr = profiles.get(a)
            if arr is None:
                arr = profiles[a] = np.zeros(cfg.K)
            arr += (av * wi) * col
    acc: dict = {}
    for a, arr in profiles.items():
        for k in np.nonzero(arr)[0]:
            key = a.plus_unit(int(k) + 1)
            acc[key] = acc.get(key, 0.0) + float(arr[k])
    return _split(acc, cfg.K, cfg.Q, tail_in)


@dataclass(frozen=True)
class IdentityReport:
    label: str
    residual: float
    tail: float


def wick_identity_check(F: ChaosVector, s: float, t: float,
                        cfg: BasisConfig) -> IdentityReport:
    """Residual of F wick dW = F * dW - int_s^t D_u F du, coefficientwise.

    Both sides use the same window coefficients, so the identity is exact
    on the retained orders; the quadratic terms pushed above Q drop from
    the two products identically.
    """
    c = window_coeffs(cfg, s, t)
    dw = _first_order(c, cfg, tail=(t - s) - float(c @ c))
    lhs = wick_product(F, dw)
    rhs = pointwise_product(F, dw).plus(_malliavin_window(F, c), -1.0)
    return IdentityReport(label=f"wick-identity[{s:g},{t:g}]",
                          residual=lhs.max_coeff_diff(rhs),
                          tail=lhs.tail + rhs.tail)


@dataclass(frozen=True)
class ForwardDecomposition:
    label: str
    residual: float
    trace_mean: float
    trace_norm2: float
    tail: float


def forward_decomposition_check(preset, cfg: BasisConfig
                                ) -> ForwardDecomposition:
    """Forward sum versus compensated integral plus derivative trace.

    Step presets are summed window by window with ordinary products on
    the left and Wick products plus the window derivative integral on
    the right; for step processes the forward sum needs no limit.
    Presets: ("adapted_step", m) freezes the truncated path value at the
    left endpoint of each of m windows; "terminal" holds the horizon
    value throughout.  Indicator processes of path-supremum times are
    refused: their trace is not square integrable.
    """
    if preset == "terminal":
        m = 8
        y_vectors = [chaos_of("W_T", cfg)] * m
        label = "terminal"
    elif isinstance(preset, tuple) and preset and preset[0] == "adapted_step":
        m = int(preset[1])
        if m < 1:
            raise ValueError("need at least one window")
        y_vectors = []
        for j in range(m):
            tj = cfg.T * j / m
            if tj == 0.0:
                y_vectors.append(ChaosVector({}, cfg.K, cfg.Q))
            else:
                y_vectors.append(_first_order(window_coeffs(cfg, 0.0, tj),
                                              cfg))
        label = f"adapted_step[{m}]"
    else:
        raise ValueError(f"unsupported forward preset {preset!r}")

    forward = ChaosVector({}, cfg.K, cfg.Q)
    sko = ChaosVector({}, cfg.K, cfg.Q)
    trace = ChaosVector({}, cfg.K, cfg.Q)
    for j, yj in enumerate(y_vectors):
        a, b = cfg.T * j / m, cfg.T * (j + 1) / m
        c = window_coeffs(cfg, a, b)
        dw = _first_order(c, cfg, tail=(b - a) - float(c @ c))
        forward = forward.plus(pointwise_product(yj, dw))
        sko = sko.plus(wick_product(yj, dw))
        trace = trace.plus(_malliavin_window(yj, c))
    resid = forward.max_coeff_diff(sko.plus(trace))
    return ForwardDecomposition(label=label, residual=resid,
                                trace_mean=trace.mean(),
                                trace_norm2=trace.norm2(),
                                tail=forward.tail + sko.tail)


@dataclass(frozen=True)
class NormVsMC:
    label: str
    norm2: float
    mc_value: float
    mc_se: float
    deficit: float
    n_samples: int
    seed: int


def _evaluate(F: ChaosVector, theta: np.ndarray) -> np.ndarray:
    cols: dict = {}
    out = np.zeros(theta.shape[0])
    for a, av in F.coeff.items():
        term = np.full(theta.shape[0], av)
        for k, d in a.pairs:
            if (k, d) not in cols:
                cols[(k, d)] = hermite_poly(d, theta[:, k - 1])
            term = term * cols[(k, d)]
        out += term
    return out


def norm_vs_mc(preset, cfg: BasisConfig, n_samples: int = 400_000,
               seed: int = 0) -> NormVsMC:
    """Coefficient norm against a Monte Carlo second moment.

    The noise coordinates are drawn directly as iid standard normals, so
    the sampled functional is exactly the truncated expansion and the
    3-SE comparison is strict; any representation deficit of the preset
    (e.g. the horizon-window mass outside the basis) is reported.
    """
    F = chaos_of(preset, cfg)
    theta = normal_block(seed, TAG_CHAOS, 0, n_samples, cfg.K)
    sq = _evaluate(F, theta) ** 2
    mc = float(np.mean(sq))
    se = float(np.std(sq) / math.sqrt(n_samples))
    return NormVsMC(label=repr(preset), norm2=F.norm2(), mc_value=mc,
                    mc_se=se, deficit=F.tail, n_samples=n_samples, seed=seed)
