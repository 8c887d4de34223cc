"""Scenario files: strict schema, canonical emission, object builders.

A scenario is one (market, horizon, random-time model, strategy, MC
budget) combination plus the checks to run against it.  Parsing is
strict -- an unknown key anywhere is an error naming the full dotted
path, so typos cannot silently disable a check.  The normalized form
(defaults filled in, numbers coerced) is the canonical one: emitting it
and parsing the emission is the identity, byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:      # pragma: no cover - python < 3.11
    import tomli as tomllib

from .market import MCConfig, MarketSpec, UtilitySpec
from .paths import TimeGrid
from .random_times import ArgmaxTime, CoxTime, HalfFinalTime

__all__ = ["ConfigError", "ScenarioConfig", "emit_toml", "load_scenario",
           "parse_scenario"]


class ConfigError(ValueError):
    """Scenario rejected; the message names the offending key."""


_CHECKS = ("gateaux", "objective_drop", "residual", "azema", "intensity",
           "singularity", "forward", "exactness")


def _want(value, kind, path):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _table(raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a table")
    return dict(raw)


def _reject_extras(raw: dict, path: str) -> None:
    if raw:
        key = sorted(raw)[0]
        raise ConfigError(f"unknown key {path}.{key}" if path
                          else f"unknown key {key}")


def _norm_market(raw, path="market"):
    raw = _table(raw, path)
    out = {}
    for key in ("rho", "mu", "sigma", "kappa"):
        if key not in raw:
            raise ConfigError(f"{path}.{key} is required")
        out[key] = _want(raw.pop(key), float, f"{path}.{key}")
    atoms = raw.pop("atoms", [])
    if not isinstance(atoms, list):
        raise ConfigError(f"{path}.atoms: expected a list of [size, rate]")
    norm_atoms = []
    for i, pair in enumerate(atoms):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise ConfigError(f"{path}.atoms[{i}]: expected [size, rate]")
        th = _want(pair[0], float, f"{path}.atoms[{i}]")
        lam = _want(pair[1], float, f"{path}.atoms[{i}]")
        if lam <= 0.0:
            raise ConfigError(f"{path}.atoms[{i}]: rate must be positive")
        if 1.0 + th <= 0.0:
            raise ConfigError(f"{path}.atoms[{i}]: a jump of size {th} "
                              "wipes out the asset")
        norm_atoms.append([th, lam])
    out["atoms"] = norm_atoms
    _reject_extras(raw, path)
    if out["kappa"] == 0.0:
        raise ConfigError(f"{path}.kappa: the default jump must be nonzero; "
                          "a default that leaves the price unmoved is "
                          "outside the model class")
    if out["kappa"] <= -1.0:
        raise ConfigError(f"{path}.kappa: a default jump of {out['kappa']} "
                          "wipes out the asset")
    return out


def _norm_model(raw, path="model"):
    raw = _table(raw, path)
    name = raw.pop("name", None)
    if name not in ("cox", "half_final", "argmax"):
        raise ConfigError(f"{path}.name: unknown model name {name!r} "
                          "(choose cox, half_final, or argmax)")
    out = {"name": name}
    if name == "cox":
        out["lam0"] = _want(raw.pop("lam0", 1.0), float, f"{path}.lam0")
        out["lam1"] = _want(raw.pop("lam1", 0.0), float, f"{path}.lam1")
        if out["lam0"] < 0.0 or out["lam1"] < 0.0:
            raise ConfigError(f"{path}: intensity coefficients must be >= 0")
    _reject_extras(raw, path)
    return out


def _norm_mc(raw, path="mc"):
    raw = _table(raw, path)
    if "seed" not in raw:
        raise ConfigError(f"{path}.seed is required (reproducibility is "
                          "not optional)")
    out = {"paths": _want(raw.pop("paths", 10_000), int, f"{path}.paths"),
           "seed": _want(raw.pop("seed"), int, f"{path}.seed"),
           "block": _want(raw.pop("block", 4096), int, f"{path}.block"),
           "delta": _want(raw.pop("delta", 1e-3), float, f"{path}.delta"),
           "richardson": _want(raw.pop("richardson", False), bool,
                               f"{path}.richardson")}
    if out["paths"] < 1 or out["block"] < 1:
        raise ConfigError(f"{path}: paths and block must be >= 1")
    _reject_extras(raw, path)
    return out


def _norm_overrides(raw, path):
    """Partial (market, model, time, mc) override for a control leg."""
    raw = _table(raw, path)
    out = {}
    if "market" in raw:
        out["market"] = _norm_market(raw.pop("market"), f"{path}.market")
    if "model" in raw:
        out["model"] = _norm_model(raw.pop("model"), f"{path}.model")
    for key in ("paths", "steps"):
        if key in raw:
            out[key] = _want(raw.pop(key), int, f"{path}.{key}")
    _reject_extras(raw, path)
    return out


def _scalars(raw, path, spec):
    """Pop (key, kind, default) triples; None default means optional."""
    out = {}
    for key, kind, default in spec:
        if key in raw:
            out[key] = _want(raw.pop(key), kind, f"{path}.{key}")
        elif default is not None:
            out[key] = default
    return out


def _norm_check(name, raw, path):
    out = {}
    if name == "gateaux":
        out = _scalars(raw, path, (("beta", str, "one"),
                                   ("concave", bool, False),
                                   ("max_t", float, 3.0),
                                   ("richardson", bool, None),
                                   ("steps", int, None),
                                   ("paths", int, None)))
        if out["beta"] not in ("one", "decaying"):
            raise ConfigError(f"{path}.beta: unknown direction {out['beta']!r}")
        if "control" in raw:
            c = _table(raw.pop("control"), f"{path}.control")
            extra = _scalars(c, f"{path}.control",
                             (("beta", str, "one"),
                              ("concave", bool, False),
                              ("max_t", float, 3.0),
                              ("richardson", bool, False)))
            if extra["beta"] not in ("one", "decaying"):
                raise ConfigError(f"{path}.control.beta: unknown direction")
            out["control"] = dict(_norm_overrides(c, f"{path}.control"),
                                  **extra)
    elif name == "objective_drop":
        out = _scalars(raw, path, (("shift", float, 0.25),
                                   ("min_t", float, 2.0),
                                   ("steps", int, None),
                                   ("paths", int, None)))
    elif name == "residual":
        out = _scalars(raw, path, (("buckets", int, 8),
                                   ("shift", float, 0.5),
                                   ("max_t", float, 3.0),
                                   ("steps", int, None),
                                   ("paths", int, None)))
    elif name == "azema":
        models = raw.pop("models", ["half_final", "argmax"])
        if (not isinstance(models, list) or not models
                or any(m not in ("half_final", "argmax") for m in models)):
            raise ConfigError(f"{path}.models: closed-form survival needs "
                              "honest presets (half_final, argmax)")
        out["models"] = list(models)
        times = raw.pop("t", [0.25, 0.5, 0.75])
        if not isinstance(times, list) or not times:
            raise ConfigError(f"{path}.t: expected a list of probe times")
        out["t"] = [_want(v, float, f"{path}.t") for v in times]
        out.update(_scalars(raw, path, (("inner", int, 10_000),
                                        ("inner_steps", int, 128),
                                        ("nodes", int, 33),
                                        ("tol", float, 0.02))))
    elif name == "intensity":
        out = _scalars(raw, path, (("buckets", int, 8),
                                   ("rel_tol", float, 0.10)))
    elif name == "singularity":
        out = _scalars(raw, path, (("min_dm_t", float, 3.0),
                                   ("max_dt_t", float, 3.0),
                                   ("probes", int, 16)))
    elif name == "forward":
        adapted = raw.pop("adapted", ["const", "linear-W", "step"])
        if not isinstance(adapted, list) or not adapted:
            raise ConfigError(f"{path}.adapted: expected a list of presets")
        out["adapted"] = list(adapted)
        out.update(_scalars(raw, path, (("anticipating", str, "terminal-W"),
                                        ("slope_lo", float, 0.3),
                                        ("slope_hi", float, 0.7),
                                        ("max_t", float, 3.0),
                                        ("paths", int, None))))
    elif name == "exactness":
        out = _scalars(raw, path, (("tol", float, 1e-12),
                                   ("paths", int, 100)))
    _reject_extras(raw, path)
    return out


def _norm_verify(raw, path="verify"):
    raw = _table(raw, path)
    checks = raw.pop("checks", None)
    if not isinstance(checks, list) or not checks:
        raise ConfigError(f"{path}.checks: expected a nonempty list")
    for c in checks:
        if c not in _CHECKS:
            raise ConfigError(f"{path}.checks: unknown check {c!r}")
    out = {"checks": list(checks)}
    for c in _CHECKS:
        if c in raw:
            if c not in checks:
                raise ConfigError(f"{path}.{c}: configured but not listed "
                                  "in checks")
            out[c] = _norm_check(c, _table(raw.pop(c), f"{path}.{c}"),
                                 f"{path}.{c}")
        elif c in checks:
            out[c] = _norm_check(c, {}, f"{path}.{c}")
    _reject_extras(raw, path)
    return out


def _norm_top(raw: dict) -> dict:
    raw = dict(raw)
    out = {}
    name = raw.pop("name", None)
    if not isinstance(name, str) or not name:
        raise ConfigError("name is required")
    out["name"] = name
    expect = raw.pop("expect", "ok")
    if expect not in ("ok", "no-optimum"):
        raise ConfigError(f"expect: unknown expectation {expect!r}")
    out["expect"] = expect

    for key, fn in (("market", _norm_market), ("model", _norm_model),
                    ("mc", _norm_mc)):
        if key not in raw:
            raise ConfigError(f"section [{key}] is required")
        out[key] = fn(raw.pop(key))

    time_raw = _table(raw.pop("time", None) or {}, "time")
    if "T" not in time_raw or "steps" not in time_raw:
        raise ConfigError("time.T and time.steps are required")
    T = _want(time_raw.pop("T"), float, "time.T")
    steps = _want(time_raw.pop("steps"), int, "time.steps")
    _reject_extras(time_raw, "time")
    if T <= 0.0 or steps < 1:
        raise ConfigError("time: need T > 0 and steps >= 1")
    out["time"] = {"T": T, "steps": steps}

    strat = _table(raw.pop("strategy", {"kind": "solve"}), "strategy")
    kind = strat.pop("kind", "solve")
    if kind not in ("solve", "constant", "shift"):
        raise ConfigError(f"strategy.kind: unknown kind {kind!r}")
    s_out = {"kind": kind}
    if kind == "constant":
        if "value" not in strat:
            raise ConfigError("strategy.value is required for kind = "
                              "\"constant\"")
        s_out["value"] = _want(strat.pop("value"), float, "strategy.value")
    if kind == "shift":
        s_out["delta"] = _want(strat.pop("delta", 0.25), float,
                               "strategy.delta")
    _reject_extras(strat, "strategy")
    out["strategy"] = s_out

    outp = _table(raw.pop("outputs", {}), "outputs")
    formats = outp.pop("formats", ["json", "csv"])
    if (not isinstance(formats, list) or not formats
            or any(f not in ("json", "csv") for f in formats)):
        raise ConfigError("outputs.formats: choose from json, csv")
    out["outputs"] = {"formats": list(formats)}
    # the directory never enters the canonical form: moving a run around
    # must not change any content hash
    directory = outp.pop("directory", None)
    if directory is not None and not isinstance(directory, str):
        raise ConfigError("outputs.directory: expected a string")
    _reject_extras(outp, "outputs")

    if "solve" in raw:
        s = _table(raw.pop("solve"), "solve")
        out["solve"] = _scalars(s, "solve",
                                (("residual_paths", int, 100),
                                 ("residual_tol", float, 1e-10),
                                 ("closed_form_tol", float, 1e-10)))
        _reject_extras(s, "solve")
    if "verify" in raw:
        out["verify"] = _norm_verify(raw.pop("verify"))
    if "drift" in raw:
        d = _table(raw.pop("drift"), "drift")
        out["drift"] = _scalars(d, "drift",
                                (("window", int, 8),
                                 ("phi_min", float, 0.3),
                                 ("cap", float, 50.0),
                                 ("t_lo", float, 0.1),
                                 ("t_hi", float, 0.875),
                                 ("probes", int, 33),
                                 ("slope_lo", float, 0.9),
                                 ("slope_hi", float, 1.1),
                                 ("max_t", float, 3.0)))
        if "control" in d:
            out["drift"]["control"] = _norm_overrides(d.pop("control"),
                                                      "drift.control")
        _reject_extras(d, "drift")
    if "chaos" in raw:
        c = _table(raw.pop("chaos"), "chaos")
        out["chaos"] = _scalars(c, "chaos",
                                (("K", int, 50), ("Q", int, 4),
                                 ("tol", float, 1e-12),
                                 ("mc_samples", int, 200_000),
                                 ("mc_seed", int, 7),
                                 ("max_t", float, 3.0),
                                 ("z0", float, -0.25),
                                 ("lam", float, 1.3)))
        if out["chaos"]["z0"] == 0.0 or out["chaos"]["lam"] <= 0.0:
            raise ConfigError("chaos: the jump atom needs z0 != 0, lam > 0")
        _reject_extras(c, "chaos")

    _reject_extras(raw, "")
    return out, directory


@dataclass(frozen=True)
class ScenarioConfig:
    """Normalized scenario; builders hand out the simulation objects."""
    data: dict
    out_dir: str | None = None

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def expect(self) -> str:
        return self.data["expect"]

    def market_spec(self, override: dict | None = None) -> MarketSpec:
        m = override or self.data["market"]
        theta = tuple(th for th, _lam in m["atoms"])
        levy = tuple((th, lam) for th, lam in m["atoms"])
        return MarketSpec(rho=m["rho"], mu=m["mu"], sigma=m["sigma"],
                          theta=theta, kappa=m["kappa"], levy_spec=levy)

    def model(self, override: dict | None = None):
        m = override or self.data["model"]
        if m["name"] == "half_final":
            return HalfFinalTime()
        if m["name"] == "argmax":
            return ArgmaxTime()
        kind = "affine-in-|W|" if m["lam1"] > 0.0 else "constant"
        return CoxTime(intensity=kind, lam0=m["lam0"], lam1=m["lam1"])

    def grid(self, steps: int | None = None) -> TimeGrid:
        t = self.data["time"]
        return TimeGrid(T=t["T"], n=steps or t["steps"])

    def mc(self, model, *, steps: int | None = None,
           paths: int | None = None, threads: int = 1) -> MCConfig:
        m = self.data["mc"]
        return MCConfig(grid=self.grid(steps), model=model,
                        n_paths=paths or m["paths"], seed=m["seed"],
                        block_paths=m["block"], threads=threads)

    def utility(self) -> UtilitySpec:
        return UtilitySpec("log")


def parse_scenario(text: str, fmt: str = "toml") -> ScenarioConfig:
    try:
        raw = (json.loads(text) if fmt == "json"
               else tomllib.loads(text))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"unparseable scenario: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a table at top level")
    data, directory = _norm_top(raw)
    return ScenarioConfig(data=data, out_dir=directory)


def load_scenario(path: str, *, paths: int | None = None,
                  seed: int | None = None) -> ScenarioConfig:
    fmt = "json" if str(path).endswith(".json") else "toml"
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_scenario(fh.read(), fmt)
    if paths is not None or seed is not None:
        data = json.loads(json.dumps(cfg.data))       # deep copy
        if paths is not None:
            data["mc"]["paths"] = int(paths)
        if seed is not None:
            data["mc"]["seed"] = int(seed)
        cfg = ScenarioConfig(data=data, out_dir=cfg.out_dir)
    return cfg


# ---------------------------------------------------------------------------
# canonical emission

def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise AssertionError(f"unemittable value {v!r}")


def _emit_table(lines, prefix, table):
    nested = [(k, v) for k, v in table.items() if isinstance(v, dict)]
    for k, v in table.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {_fmt_value(v)}")
    for k, v in nested:
        lines.append("")
        lines.append(f"[{prefix}{k}]")
        _emit_table(lines, f"{prefix}{k}.", v)


def emit_toml(cfg: ScenarioConfig) -> str:
    """Canonical text form; parse(emit(cfg)) reproduces cfg exactly."""
    lines = []
    for k, v in cfg.data.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {_fmt_value(v)}")
    for k, v in cfg.data.items():
        if isinstance(v, dict):
            lines.append("")
            lines.append(f"[{k}]")
            _emit_table(lines, f"{k}.", v)
    return "\n".join(lines) + "\n"
