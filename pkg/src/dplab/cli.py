"""Experiment runner: scenario config in, deterministic reports out.

Exit codes: 0 all selected assertions pass, 1 configuration error,
2 assertion failure.  Reports are JSON with stable key order and CSV
with a header row; identical (config, seed, version) gives byte-
identical report and table files whatever the thread count, so the
manifest is the only place volatile facts (wall time) may live.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import chaos as cx
from . import poisson_chaos as px
from . import random_times as rt
from . import verifier as vf
from .config import ConfigError, ScenarioConfig, emit_toml, load_scenario
from .market import (MarketSpec, Strategy, _collect_jumps, _wealth_block)
from .optimizer import (NoAdmissibleOptimum, OptimalityInputs,
                        before_residual, build_strategy,
                        solve_quadratic_closed_form)
from .paths import brownian_levels_block
from .random_times import default_times_block

_SUBCOMMANDS = ("simulate", "solve", "verify", "chaos-check", "drift-scan")


# ---------------------------------------------------------------------------
# report plumbing

def _val(value, se=None):
    if se is None:
        return {"value": float(value), "exact": True}
    return {"value": float(value), "se": float(se)}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Run:
    """Collects verdicts and tables, then writes the report set."""

    def __init__(self, cfg: ScenarioConfig, subcommand: str, out_dir: str):
        self.cfg = cfg
        self.sub = subcommand
        self.out_dir = out_dir
        self.verdicts = []
        self.tables = {}
        self.t0 = time.time()
        canonical = emit_toml(cfg).encode("utf-8")
        self.config_text = canonical
        self.config_sha = _sha256(canonical)

    def verdict(self, check: str, passed: bool, **detail):
        self.verdicts.append(dict({"check": check, "passed": bool(passed)},
                                  **detail))

    def table(self, name: str, header: list, rows: list):
        self.tables[name] = {"header": list(header),
                             "rows": [list(r) for r in rows]}

    def _csv(self, name: str) -> bytes:
        t = self.tables[name]

        def cell(v):
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lines = [",".join(t["header"])]
        lines += [",".join(cell(v) for v in row) for row in t["rows"]]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def finish(self) -> int:
        os.makedirs(self.out_dir, exist_ok=True)
        formats = self.cfg.data["outputs"]["formats"]
        outputs = {}
        outputs["scenario.toml"] = self.config_text
        if "json" in formats:
            report = {"scenario": self.cfg.name,
                      "subcommand": self.sub,
                      "config_sha256": self.config_sha,
                      "tool_version": __version__,
                      "verdicts": self.verdicts,
                      "tables": self.tables}
            outputs["report.json"] = (json.dumps(report, indent=2,
                                                 sort_keys=True)
                                      + "\n").encode("utf-8")
        if "csv" in formats:
            for name in self.tables:
                outputs[f"{name}.csv"] = self._csv(name)
        hashes = {}
        for fname, data in outputs.items():
            _atomic_write(os.path.join(self.out_dir, fname), data)
            hashes[fname] = _sha256(data)
        manifest = {"scenario": self.cfg.name,
                    "subcommand": self.sub,
                    "config_sha256": self.config_sha,
                    "tool_version": __version__,
                    "outputs": hashes,
                    "runtime_seconds": round(time.time() - self.t0, 3)}
        _atomic_write(os.path.join(self.out_dir, "manifest.json"),
                      (json.dumps(manifest, indent=2, sort_keys=True)
                       + "\n").encode("utf-8"))
        return 0 if all(v["passed"] for v in self.verdicts) else 2


# ---------------------------------------------------------------------------
# shared builders

def _strategy(cfg: ScenarioConfig, spec: MarketSpec, model) -> Strategy:
    s = cfg.data["strategy"]
    if s["kind"] == "constant":
        return Strategy(before=s["value"], after=s["value"])
    solved = build_strategy(model, spec, T=cfg.data["time"]["T"])
    if s["kind"] == "shift":
        return _shifted(solved, s["delta"])
    return solved


def _shifted(st: Strategy, d: float) -> Strategy:
    return Strategy(
        before=lambda t, w, m: st.before_values(t, w, m) + d,
        after=lambda t, w, m, tau, w_T:
            st.after_values(t, w, m, tau, w_T) + d,
        eps=st.eps, label=f"{st.label}+{d:g}")


def _beta(kind: str, T: float):
    if kind == "one":
        return 1.0
    return lambda t, w, m: 1.0 - t / T


def _leg(cfg: ScenarioConfig, over: dict, threads: int):
    """(spec, model, mc) for a control leg's partial overrides."""
    spec = cfg.market_spec(over.get("market"))
    model = cfg.model(over.get("model"))
    mc = cfg.mc(model, steps=over.get("steps"), paths=over.get("paths"),
                threads=threads)
    return spec, model, mc


# ---------------------------------------------------------------------------
# subcommands

def _run_simulate(cfg: ScenarioConfig, run: _Run, threads: int) -> None:
    spec = cfg.market_spec()
    model = cfg.model()
    mc = cfg.mc(model, threads=threads)
    st = _strategy(cfg, spec, model)
    grid = mc.grid
    rows = []
    total = 0.0
    total_sq = 0.0
    n_default = 0
    for first in range(0, mc.n_paths, mc.block_paths):
        cnt = min(mc.block_paths, mc.n_paths - first)
        levels = brownian_levels_block(grid, mc.seed, first, cnt)
        tau = default_times_block(model, grid, levels, first)
        jumps = _collect_jumps(spec, grid, mc.seed, first, cnt, tau)
        dlog, _margin, _arg = _wealth_block(spec, st, grid, levels, tau,
                                            jumps, want_margins=False)
        log_x = math.log(mc.x0) + dlog.sum(axis=1)
        total += float(log_x.sum())
        total_sq += float(log_x @ log_x)
        n_default += int((tau <= grid.T).sum())
        for i in range(cnt):
            rows.append([first + i, float(tau[i]),
                         int(tau[i] <= grid.T),
                         float(levels[i, -1]), float(log_x[i])])
    mean = total / mc.n_paths
    var = max(total_sq / mc.n_paths - mean * mean, 0.0)
    se = math.sqrt(var / mc.n_paths)
    run.table("paths", ["path", "tau", "defaulted", "w_T", "log_wealth_T"],
              rows)
    run.verdict("simulate", True,
                mean_log_wealth=_val(mean, se),
                default_fraction=_val(n_default / mc.n_paths),
                n_paths=mc.n_paths)


def _stationarity_inputs(model, spec: MarketSpec, T, t_left, w):
    """Vectorized (trace/Z, lam/Z) fields entering the pre-default rule."""
    if isinstance(model, rt.HalfFinalTime):
        dlt = np.maximum(T - t_left, 1e-300)
        Z = rt.z_half(w, dlt)
        with np.errstate(divide="ignore", invalid="ignore"):
            tz = rt.trace_half(w, dlt) / Z
            lam_over_z = rt.intensity_half(w, dlt) / Z
        r = np.abs(w) / np.sqrt(dlt)
        tz = np.where(r > 30.0, -w / dlt, tz)
        lam_over_z = np.where(r > 30.0, 1.0 / dlt, lam_over_z)
        return tz, lam_over_z
    if isinstance(model, rt.CoxTime):
        lam = model.lam0 + (model.lam1 * np.abs(w)
                            if model.intensity == "affine-in-|W|" else 0.0)
        return np.zeros_like(w), lam + np.zeros_like(w)
    raise ConfigError(f"{model.name}: no pre-default condition to check")


def _run_solve(cfg: ScenarioConfig, run: _Run, threads: int) -> None:
    spec = cfg.market_spec()
    model = cfg.model()
    T = cfg.data["time"]["T"]
    try:
        st = build_strategy(model, spec, T=T)
    except NoAdmissibleOptimum as exc:
        if cfg.expect == "no-optimum":
            run.verdict("expected-no-optimum", True, detail=str(exc))
        else:
            run.verdict("solve", False, error="no-admissible-optimum",
                        detail=str(exc))
        return
    if cfg.expect == "no-optimum":
        run.verdict("expected-no-optimum", False,
                    detail="an admissible optimum exists")
        return
    pi0 = float(np.asarray(st.before_values(
        np.array(0.0), np.array(0.0), np.array(0.0))).ravel()[0])
    piT = float(np.asarray(st.after_values(
        np.array(0.0), np.array(0.0), np.array(0.0),
        np.array(0.0), np.array(0.0))).ravel()[0])
    run.verdict("solve", True, pi_before_at_origin=_val(pi0),
                pi_after=_val(piT))

    if "solve" not in cfg.data:
        return
    pars = cfg.data["solve"]
    grid = cfg.grid()
    n_paths = pars["residual_paths"]
    levels = brownian_levels_block(grid, cfg.data["mc"]["seed"], 0, n_paths)
    t_left = grid.times()[:-1]
    w = levels[:, :-1]
    m = np.maximum.accumulate(levels, axis=1)[:, :-1]
    pi = st.before_values(t_left[None, :], w, m)
    tz, lam_over_z = _stationarity_inputs(model, spec, T,
                                          t_left[None, :], w)
    mk = cfg.data["market"]
    atoms = tuple((th, lam) for th, lam in mk["atoms"])
    ii = OptimalityInputs(excess=mk["mu"] - mk["rho"],
                          sigma2=mk["sigma"] ** 2, atoms=atoms,
                          kappa=mk["kappa"], Z=1.0, trace=tz,
                          lam=lam_over_z)
    res = np.abs(before_residual(pi, ii))
    res_max = float(res.max())
    run.verdict("solve-residual", res_max <= pars["residual_tol"],
                max_abs_residual=_val(res_max),
                tol=pars["residual_tol"], n_paths=n_paths,
                grid_steps=grid.n)
    if atoms:
        raise ConfigError("solve.closed_form cross-check needs a "
                          "jump-free market")
    sig = mk["sigma"]
    a = (mk["mu"] - mk["rho"]) / sig ** 2 + tz / sig
    b = lam_over_z / sig ** 2
    worst = 0.0
    sample = []
    for i in range(n_paths):
        for k in range(grid.n):
            ref = solve_quadratic_closed_form(a[i, k], b[i, k],
                                              mk["kappa"]).pi
            worst = max(worst, abs(ref - pi[i, k]))
            if i < 2 and k % max(grid.n // 16, 1) == 0:
                sample.append([float(t_left[k]), float(w[i, k]),
                               float(pi[i, k]), float(res[i, k])])
    run.verdict("solve-closed-form", worst <= pars["closed_form_tol"],
                max_abs_diff=_val(worst), tol=pars["closed_form_tol"])
    run.table("solve_residuals", ["t", "w", "pi", "abs_residual"], sample)


def _run_drift_scan(cfg: ScenarioConfig, run: _Run, threads: int) -> None:
    pars = cfg.data.get("drift") or {
        "window": 8, "phi_min": 0.3, "cap": 50.0, "t_lo": 0.1,
        "t_hi": 0.875, "probes": 33, "slope_lo": 0.9, "slope_hi": 1.1,
        "max_t": 3.0}
    model = cfg.model()
    mc = cfg.mc(model, threads=threads)
    rep = vf.g_drift_regression(model, mc, window_steps=pars["window"],
                                phi_min=pars["phi_min"],
                                predictor_cap=pars["cap"],
                                t_lo=pars["t_lo"], t_hi=pars["t_hi"],
                                n_probes=pars["probes"])
    rows = []
    for reg in (rep.before, rep.after):
        ok = (pars["slope_lo"] <= reg.slope <= pars["slope_hi"]
              and abs(reg.intercept) <= pars["max_t"] * reg.intercept_se)
        run.verdict(f"drift-{reg.side}", ok,
                    slope=_val(reg.slope, reg.slope_se),
                    intercept=_val(reg.intercept, reg.intercept_se),
                    n_pairs=reg.n_pairs)
        rows.append([rep.model, reg.side, reg.slope, reg.slope_se,
                     reg.intercept, reg.intercept_se, reg.n_pairs])
    if "control" in pars:
        spec_c, model_c, mc_c = _leg(cfg, pars["control"], threads)
        del spec_c
        rep_c = vf.g_drift_regression(model_c, mc_c,
                                      window_steps=pars["window"],
                                      phi_min=pars["phi_min"],
                                      predictor_cap=pars["cap"],
                                      t_lo=pars["t_lo"], t_hi=pars["t_hi"],
                                      n_probes=pars["probes"])
        for reg in (rep_c.before, rep_c.after):
            ok = abs(reg.slope) <= pars["max_t"] * reg.slope_se
            run.verdict(f"drift-control-{reg.side}", ok,
                        slope=_val(reg.slope, reg.slope_se),
                        n_pairs=reg.n_pairs)
            rows.append([rep_c.model, reg.side, reg.slope, reg.slope_se,
                         reg.intercept, reg.intercept_se, reg.n_pairs])
    run.table("drift", ["model", "side", "slope", "slope_se", "intercept",
                        "intercept_se", "n_pairs"], rows)


def _check_gateaux(cfg, run, threads, pars, *, tag="gateaux", leg=None):
    if leg is None:
        spec = cfg.market_spec()
        model = cfg.model()
        mc = cfg.mc(model, steps=pars.get("steps"), paths=pars.get("paths"),
                    threads=threads)
    else:
        spec, model, mc = leg
    st = _strategy(cfg, spec, model)
    rich = pars.get("richardson")
    if rich is None:
        rich = cfg.data["mc"]["richardson"]
    g = vf.gateaux_derivative(spec, st, _beta(pars["beta"], mc.grid.T),
                              cfg.utility(), mc,
                              delta=cfg.data["mc"]["delta"],
                              richardson=rich)
    ok = abs(g.psi_value) <= pars["max_t"] * g.psi_se
    run.verdict(f"{tag}-stationary", ok,
                psi=_val(g.psi_value, g.psi_se),
                fd=_val(g.fd_value, g.fd_se), n_paths=g.n_paths)
    if pars["concave"]:
        ok2 = g.second_value <= -pars["max_t"] * g.second_se
        run.verdict(f"{tag}-concave", ok2,
                    second=_val(g.second_value, g.second_se))


def _run_verify(cfg: ScenarioConfig, run: _Run, threads: int) -> None:
    if "verify" not in cfg.data:
        raise ConfigError("verify: scenario has no [verify] section")
    v = cfg.data["verify"]
    spec = cfg.market_spec()
    model = cfg.model()
    U = cfg.utility()
    T = cfg.data["time"]["T"]

    for check in v["checks"]:
        pars = v[check]
        if check == "gateaux":
            _check_gateaux(cfg, run, threads, pars)
            if "control" in pars:
                _check_gateaux(cfg, run, threads, pars["control"],
                               tag="gateaux-control",
                               leg=_leg(cfg, pars["control"], threads))
        elif check == "objective_drop":
            st = build_strategy(model, spec, T=T)
            mc = cfg.mc(model, steps=pars.get("steps"),
                        paths=pars.get("paths"), threads=threads)
            od = vf.objective_difference(spec, st,
                                         _shifted(st, pars["shift"]), U, mc)
            ok = od.diff >= pars["min_t"] * od.diff_se
            run.verdict("objective-drop", ok,
                        j_solved=_val(od.j_a), j_shifted=_val(od.j_b),
                        drop=_val(od.diff, od.diff_se),
                        shift=pars["shift"])
        elif check == "residual":
            st = build_strategy(model, spec, T=T)
            mc = cfg.mc(model, steps=pars.get("steps"),
                        paths=pars.get("paths"), threads=threads)
            edges = np.linspace(0.0, T, pars["buckets"] + 1)
            rep = vf.martingale_residual(spec, st, U, edges, mc)
            rep2 = vf.martingale_residual(spec, _shifted(st, pars["shift"]),
                                          U, edges, mc)
            run.verdict("residual-solved-within",
                        rep.all_within(pars["max_t"]),
                        worst_t=_val(rep.worst_t), buckets=pars["buckets"])
            run.verdict("residual-shift-detected",
                        not rep2.all_within(pars["max_t"]),
                        worst_t=_val(rep2.worst_t), shift=pars["shift"])
            rows = []
            for which, r in (("solved", rep), ("shifted", rep2)):
                for bi, coefs in enumerate(r.coefficients):
                    for feat, cs in coefs.items():
                        if cs is None:
                            continue
                        rows.append([which, bi, feat, cs[0], cs[1]])
            run.table("residual_coefficients",
                      ["strategy", "bucket", "feature", "coef", "se"], rows)
        elif check == "azema":
            for mname in pars["models"]:
                m_obj = cfg.model({"name": mname})
                mc = cfg.mc(m_obj, threads=threads)
                rep = vf.azema_validation(m_obj, mc, t_list=tuple(pars["t"]),
                                          n_inner=pars["inner"],
                                          inner_steps=pars["inner_steps"],
                                          n_nodes=pars["nodes"])
                run.verdict(f"azema-{mname}", rep.worst < pars["tol"],
                            worst_abs_err=_val(rep.worst),
                            tol=pars["tol"], n_inner=rep.n_inner)
                run.table(f"azema_{mname}",
                          ["t", "max_abs", "mean_abs", "n_states"],
                          [[r.t, r.max_abs, r.mean_abs, r.n_states]
                           for r in rep.rows])
        elif check == "intensity":
            mc = cfg.mc(model, threads=threads)
            rep = vf.hazard_bucket_check(model, mc,
                                         n_buckets=pars["buckets"])
            run.verdict("intensity-buckets",
                        rep.worst_rel < pars["rel_tol"],
                        worst_rel_err=_val(rep.worst_rel),
                        total_mass=_val(rep.total_mass),
                        rel_tol=pars["rel_tol"])
            run.table("intensity_buckets",
                      ["t_lo", "t_hi", "n_alive", "freq", "model_mass",
                       "rel_err"],
                      [[r.t_lo, r.t_hi, r.n_alive, r.freq, r.model_mass,
                        r.rel_err] for r in rep.rows])
        elif check == "singularity":
            mc = cfg.mc(model, threads=threads)
            rep = vf.compensator_singularity_probe(model, mc,
                                                   n_probes=pars["probes"])
            run.verdict("singularity-containment",
                        rep.containment_violations == 0,
                        violations=rep.containment_violations,
                        n_windows=rep.n_windows)
            run.verdict("singularity-dm-loading",
                        rep.dm_t > pars["min_dm_t"],
                        dm=_val(rep.dm_coef, rep.dm_se),
                        t_stat=_val(rep.dm_t))
            run.verdict("singularity-no-dt-drift",
                        abs(rep.dm0_dt_t) < pars["max_dt_t"],
                        dt_given_flat=_val(rep.dm0_dt_coef, rep.dm0_dt_se),
                        t_stat=_val(rep.dm0_dt_t))
        elif check == "forward":
            rows = []
            for preset in pars["adapted"]:
                mc = cfg.mc(model, paths=pars.get("paths"), threads=threads)
                tab = vf.forward_vs_ito(preset, mc)
                ok = pars["slope_lo"] <= tab.slope <= pars["slope_hi"]
                run.verdict(f"forward-slope-{preset}", ok,
                            slope=_val(tab.slope))
                rows += [[preset, r.eps, r.rms_diff, r.mean_diff, r.se_diff]
                         for r in tab.rows]
            mc = cfg.mc(model, paths=pars.get("paths"), threads=threads)
            tab = vf.forward_vs_ito(pars["anticipating"], mc)
            gap = abs(tab.anticipating_mean - mc.grid.T)
            run.verdict("forward-anticipating-trace",
                        gap <= pars["max_t"] * tab.anticipating_se,
                        difference=_val(tab.anticipating_mean,
                                        tab.anticipating_se),
                        target=_val(mc.grid.T))
            rows += [[pars["anticipating"], r.eps, r.rms_diff, r.mean_diff,
                      r.se_diff] for r in tab.rows]
            run.table("forward", ["preset", "eps", "rms_diff", "mean_diff",
                                  "se_diff"], rows)
        elif check == "exactness":
            _check_exactness(cfg, run, pars, spec, model)
    return


def _check_exactness(cfg, run, pars, spec, model):
    mk = cfg.data["market"]
    if mk["sigma"] != 0.0 or mk["atoms"]:
        raise ConfigError("exactness check needs sigma = 0 and no jump "
                          "atoms (the wealth path must be deterministic "
                          "between defaults)")
    pi = cfg.data["strategy"].get("value")
    if pi is None:
        raise ConfigError("exactness check needs an explicit constant "
                          "strategy")
    grid = cfg.grid()
    st = _strategy(cfg, spec, model)
    n_paths = pars["paths"]
    seed = cfg.data["mc"]["seed"]
    levels = brownian_levels_block(grid, seed, 0, n_paths)
    tau = default_times_block(model, grid, levels, 0)
    jumps = _collect_jumps(spec, grid, seed, 0, n_paths, tau)
    dlog, _m, _a = _wealth_block(spec, st, grid, levels, tau, jumps,
                                 want_margins=False)
    log_x = dlog.sum(axis=1)
    from .market import _default_grid_index
    drift = mk["rho"] + pi * (mk["mu"] - mk["rho"])
    worst = 0.0
    for i in range(n_paths):
        ref = drift * grid.dt * grid.n
        if _default_grid_index(grid, float(tau[i])) <= grid.n:
            ref += math.log(1.0 + pi * mk["kappa"])
        worst = max(worst, abs(log_x[i] - ref))
    run.verdict("exactness", worst <= pars["tol"],
                max_abs_dev=_val(worst), tol=pars["tol"],
                n_paths=n_paths)


def _run_chaos(cfg: ScenarioConfig, run: _Run, threads: int) -> None:
    pars = cfg.data.get("chaos") or {
        "K": 50, "Q": 4, "tol": 1e-12, "mc_samples": 200_000,
        "mc_seed": 7, "max_t": 3.0, "z0": -0.25, "lam": 1.3}
    basis = cx.make_basis(K=pars["K"], Q=pars["Q"])
    T = basis.T
    rows = []

    def ident(kind, label, rep):
        ok = rep.residual <= pars["tol"] + rep.tail
        rows.append([kind, label, rep.residual, rep.tail, int(ok)])
        run.verdict(f"{kind}-{label}", ok, residual=_val(rep.residual),
                    truncation_mass=_val(rep.tail))

    const = cx.ChaosVector({cx.MultiIndex.make({}): 2.5}, basis.K, basis.Q)
    for label, F, (s, t) in (
            ("W_T[0,1]", cx.chaos_of("W_T", basis), (0.0, T)),
            ("const[0,0.5]", const, (0.0, 0.5)),
            ("h2(theta1)[0.3,0.9]", cx.chaos_of(("hermite", 2, 1), basis),
             (0.3, 0.9)),
            ("theta3[0.1,0.7]", cx.chaos_of(("theta", 3), basis),
             (0.1, 0.7))):
        ident("wick", label, cx.wick_identity_check(F, s, t, basis))
    for preset, label in (("terminal", "terminal"),
                          (("adapted_step", 8), "adapted_step8")):
        rep = cx.forward_decomposition_check(preset, basis)
        ident("forward", label, rep)
    nu = ((pars["z0"], pars["lam"]),)
    for preset in (("const", 2.5), ("ntilde_power", 1),
                   ("ntilde_power", 2)):
        for window in ((0.0, 1.0), (0.3, 0.6)):
            rep = px.poisson_single_atom_check(preset, window, nu, T=1.0)
            ident("poisson", f"{preset[0]}{preset[1]}[{window[0]:g},"
                  f"{window[1]:g}]", rep)
    run.table("identities", ["kind", "label", "residual",
                             "truncation_mass", "passed"], rows)

    norm_rows = []
    for preset in (("hermite", 2, 1), "W_T",
                   ("product", ("theta", 1), ("theta", 2))):
        chk = cx.norm_vs_mc(preset, basis, n_samples=pars["mc_samples"],
                            seed=pars["mc_seed"])
        ok = abs(chk.mc_value - chk.norm2) <= pars["max_t"] * chk.mc_se
        run.verdict(f"norm-{chk.label}", ok,
                    norm2=_val(chk.norm2),
                    mc=_val(chk.mc_value, chk.mc_se),
                    deficit=_val(chk.deficit))
        norm_rows.append(["gauss", chk.label, chk.norm2, chk.mc_value,
                          chk.mc_se, chk.deficit, int(ok)])
    pbasis = px.make_poisson_basis(z0=pars["z0"], lam=pars["lam"], T=1.0)
    for preset in (("ntilde_power", 1), ("ntilde_power", 2)):
        chk = px.poisson_norm_vs_mc(preset, pbasis,
                                    n_samples=pars["mc_samples"],
                                    seed=pars["mc_seed"])
        ok = abs(chk.mc_value - chk.norm2) <= pars["max_t"] * chk.mc_se
        run.verdict(f"norm-poisson-{preset[1]}", ok,
                    norm2=_val(chk.norm2),
                    mc=_val(chk.mc_value, chk.mc_se))
        norm_rows.append(["poisson", chk.label, chk.norm2, chk.mc_value,
                          chk.mc_se, chk.deficit, int(ok)])
    run.table("norms", ["family", "label", "norm2", "mc_value", "mc_se",
                        "deficit", "passed"], norm_rows)


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dplab",
        description="simulation and verification lab for default-risk "
                    "portfolio rules")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
    return ap


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    threads = ns.threads
    if threads is None:
        threads = int(os.environ.get("DPLAB_THREADS", "1") or "1")
    try:
        cfg = load_scenario(ns.config, paths=ns.paths, seed=ns.seed)
        out_dir = ns.out or cfg.out_dir or os.path.join("runs", cfg.name)
        run = _Run(cfg, ns.subcommand, out_dir)
        if ns.subcommand == "simulate":
            _run_simulate(cfg, run, threads)
        elif ns.subcommand == "solve":
            _run_solve(cfg, run, threads)
        elif ns.subcommand == "verify":
            _run_verify(cfg, run, threads)
        elif ns.subcommand == "chaos-check":
            _run_chaos(cfg, run, threads)
        elif ns.subcommand == "drift-scan":
            _run_drift_scan(cfg, run, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NoAdmissibleOptimum, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    code = run.finish()
    for v in run.verdicts:
        flag = "PASS" if v["passed"] else "FAIL"
        print(f"[{flag}] {v['check']}")
    return code


if __name__ == "__main__":      # pragma: no cover
    sys.exit(main())
