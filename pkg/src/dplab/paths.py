"""Brownian paths, finite-atom jump fields, and derived path statistics.

Uniform grids only.  Everything is reproducible from (seed, path index):
regenerating any path, in any batch partition, gives identical bits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.stats as st

from . import rng


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with n steps."""

    T: float
    n: int

    def __post_init__(self):
        if not (self.T > 0.0):
            raise ValueError("horizon T must be positive")
        if int(self.n) < 1 or self.n != int(self.n):
            raise ValueError("step count n must be a positive integer")
        object.__setattr__(self, "n", int(self.n))

    @property
    def dt(self) -> float:
        return self.T / self.n

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n + 1)


def make_grid(T: float, n: int) -> TimeGrid:
    return TimeGrid(float(T), n)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    levels: np.ndarray          # W_0..W_n
    running_max: np.ndarray
    running_min: np.ndarray
    seed: int
    path_index: int

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.levels)


class Extrema(NamedTuple):
    running_max: np.ndarray
    running_min: np.ndarray
    forward_max: np.ndarray     # max over j >= i
    forward_min: np.ndarray


@dataclass(frozen=True, eq=False)
class JumpField:
    """Events of a finite-atom Poisson field on (0, T].

    times carry full precision; step_index attributes each event to the
    grid step (t_k, t_{k+1}] containing it, which is all the integrators
    use.  mark_atom indexes into levy_spec.
    """

    times: np.ndarray           # exact event times, increasing
    marks: np.ndarray           # mark values z
    mark_atom: np.ndarray       # atom index per event
    step_index: np.ndarray      # grid step containing each event
    levy_spec: tuple            # ((z_j, lam_j), ...)
    seed: int
    path_index: int


@dataclass(frozen=True, eq=False)
class PathBundle:
    grid: TimeGrid
    brownian: BrownianPath
    jumps: JumpField
    seed: int

    @property
    def path_index(self) -> int:
        return self.brownian.path_index


# ---------------------------------------------------------------------------
# batch generation (the workhorse; single-path ops wrap it)

def brownian_levels_block(grid: TimeGrid, seed: int, first_path: int,
                          n_paths: int) -> np.ndarray:
    """(n_paths, n+1) W levels; row p is path first_path + p of this seed."""
    z = rng.normal_block(seed, rng.TAG_BROWNIAN, first_path, n_paths, grid.n)
    w = np.empty((n_paths, grid.n + 1))
    w[:, 0] = 0.0
    np.cumsum(z * np.sqrt(grid.dt), axis=1, out=w[:, 1:])
    return w


def sample_brownian(grid: TimeGrid, seed: int, path_index: int = 0) -> BrownianPath:
    levels = brownian_levels_block(grid, seed, path_index, 1)[0]
    return BrownianPath(levels=levels,
                        running_max=np.maximum.accumulate(levels),
                        running_min=np.minimum.accumulate(levels),
                        seed=int(seed), path_index=int(path_index))


def _event_cap(lam_T: float) -> int:
    # generous deterministic cap; overflow probability < 1e-13 per path/atom
    return int(st.poisson.ppf(1.0 - 1e-13, lam_T)) + 2


_SPARES = 8


def _jump_slot_layout(grid: TimeGrid, levy_spec) -> tuple[int, list[int]]:
    caps = [_event_cap(lam * grid.T) for (_z, lam) in levy_spec]
    draws = sum(c + _SPARES for c in caps)
    return draws, caps


def sample_jumps(grid: TimeGrid, levy_spec, seed: int, path_index: int = 0,
                 forbidden_times: Sequence[float] = ()) -> JumpField:
    """Poisson(lam_j T) events per atom, times uniform on (0, T].

    An event landing exactly (to the float) on a forbidden time — a stored
    default time — is redrawn from reserved spare draws.
    """
    levy_spec = tuple((float(z), float(lam)) for (z, lam) in levy_spec)
    for z, lam in levy_spec:
        if lam <= 0.0:
            raise ValueError("atom rates must be positive")
        if z == 0.0:
            raise ValueError("marks must be nonzero")
    if not levy_spec:
        empty = np.empty(0)
        return JumpField(times=empty, marks=empty.copy(),
                         mark_atom=np.empty(0, dtype=np.int64),
                         step_index=np.empty(0, dtype=np.int64),
                         levy_spec=(), seed=int(seed), path_index=int(path_index))

    counts = jump_counts_block(grid, levy_spec, seed, path_index, 1)[0]
    draws, caps = _jump_slot_layout(grid, levy_spec)
    u = rng.uniform_block(seed, rng.TAG_JUMP_TIMES, path_index, 1, draws)[0]

    times, marks, atoms = [], [], []
    offset = 0
    forbidden = np.asarray(forbidden_times, dtype=float)
    for j, (z, lam) in enumerate(levy_spec):
        c = int(counts[j])
        if c > caps[j]:
            raise RuntimeError("event count exceeded the deterministic cap")
        slot = u[offset:offset + caps[j] + _SPARES]
        tj = slot[:c] * grid.T
        spare = list(slot[caps[j]:] * grid.T)
        if forbidden.size:
            for i in range(c):
                while np.any(tj[i] == forbidden):
                    if not spare:
                        raise RuntimeError("ran out of spare draws resampling "
                                           "an event colliding with a default time")
                    tj[i] = spare.pop(0)
        times.append(tj)
        marks.append(np.full(c, z))
        atoms.append(np.full(c, j, dtype=np.int64))
        offset += caps[j] + _SPARES

    t = np.concatenate(times)
    order = np.argsort(t, kind="stable")
    t = t[order]
    # event in (t_k, t_{k+1}] belongs to step k
    step = np.minimum(np.ceil(t / grid.dt).astype(np.int64) - 1, grid.n - 1)
    step = np.maximum(step, 0)
    return JumpField(times=t, marks=np.concatenate(marks)[order],
                     mark_atom=np.concatenate(atoms)[order],
                     step_index=step, levy_spec=levy_spec,
                     seed=int(seed), path_index=int(path_index))


def jump_counts_block(grid: TimeGrid, levy_spec, seed: int, first_path: int,
                      n_paths: int) -> np.ndarray:
    """(n_paths, n_atoms) Poisson event counts via inverse CDF."""
    levy_spec = tuple(levy_spec)
    if not levy_spec:
        return np.zeros((n_paths, 0), dtype=np.int64)
    u = rng.uniform_block(seed, rng.TAG_JUMP_COUNTS, first_path, n_paths,
                          len(levy_spec))
    mus = np.array([lam * grid.T for (_z, lam) in levy_spec])
    return st.poisson.ppf(u, mus[None, :]).astype(np.int64)


def sample_bundle(grid: TimeGrid, levy_spec, seed: int,
                  path_index: int = 0) -> PathBundle:
    return PathBundle(grid=grid,
                      brownian=sample_brownian(grid, seed, path_index),
                      jumps=sample_jumps(grid, levy_spec, seed, path_index),
                      seed=int(seed))


# ---------------------------------------------------------------------------

def running_extrema(path: BrownianPath) -> Extrema:
    w = path.levels
    return Extrema(running_max=np.maximum.accumulate(w),
                   running_min=np.minimum.accumulate(w),
                   forward_max=np.maximum.accumulate(w[::-1])[::-1].copy(),
                   forward_min=np.minimum.accumulate(w[::-1])[::-1].copy())


def refine(bundle: PathBundle, factor: int, seed: int) -> PathBundle:
    """Brownian-bridge sub-stepping: coarse levels kept exactly."""
    if int(factor) < 2:
        raise ValueError("refinement factor must be >= 2")
    factor = int(factor)
    grid = bundle.grid
    fine = TimeGrid(grid.T, grid.n * factor)
    dtf = fine.dt

    w = bundle.brownian.levels
    z = rng.normal_block(seed, rng.TAG_REFINE, bundle.path_index, 1,
                         grid.n * (factor - 1))[0].reshape(grid.n, factor - 1)
    out = np.empty(fine.n + 1)
    out[::factor] = w
    prev = w[:-1].copy()
    b = w[1:]
    for j in range(1, factor):
        remaining = factor - j
        mean = prev + (b - prev) / (remaining + 1)
        var = dtf * remaining / (remaining + 1)
        prev = mean + np.sqrt(var) * z[:, j - 1]
        out[j::factor][: grid.n] = prev

    brow = BrownianPath(levels=out,
                        running_max=np.maximum.accumulate(out),
                        running_min=np.minimum.accumulate(out),
                        seed=bundle.brownian.seed,
                        path_index=bundle.path_index)
    jf = bundle.jumps
    step = np.minimum(np.ceil(jf.times / dtf).astype(np.int64) - 1, fine.n - 1)
    step = np.maximum(step, 0)
    jumps = JumpField(times=jf.times, marks=jf.marks, mark_atom=jf.mark_atom,
                      step_index=step, levy_spec=jf.levy_spec,
                      seed=jf.seed, path_index=jf.path_index)
    return PathBundle(grid=fine, brownian=brow, jumps=jumps, seed=bundle.seed)


def subsample(bundle: PathBundle, factor: int) -> PathBundle:
    """Inverse of refine(): keep every factor-th grid point."""
    factor = int(factor)
    grid = bundle.grid
    if factor < 2 or grid.n % factor:
        raise ValueError("factor must divide the step count")
    coarse = TimeGrid(grid.T, grid.n // factor)
    w = bundle.brownian.levels[::factor].copy()
    brow = BrownianPath(levels=w,
                        running_max=np.maximum.accumulate(w),
                        running_min=np.minimum.accumulate(w),
                        seed=bundle.brownian.seed,
                        path_index=bundle.path_index)
    jf = bundle.jumps
    step = np.minimum(np.ceil(jf.times / coarse.dt).astype(np.int64) - 1,
                      coarse.n - 1)
    step = np.maximum(step, 0)
    jumps = JumpField(times=jf.times, marks=jf.marks, mark_atom=jf.mark_atom,
                      step_index=step, levy_spec=jf.levy_spec,
                      seed=jf.seed, path_index=jf.path_index)
    return PathBundle(grid=coarse, brownian=brow, jumps=jumps, seed=bundle.seed)


# ---------------------------------------------------------------------------
# serialization

def bundle_to_csv(bundle: PathBundle, fp) -> None:
    fp.write(f"# seed={bundle.seed} path={bundle.path_index} "
             f"T={bundle.grid.T!r} n={bundle.grid.n}\n")
    fp.write("t,W,M,m\n")
    t = bundle.grid.times()
    w = bundle.brownian.levels
    mx = bundle.brownian.running_max
    mn = bundle.brownian.running_min
    for i in range(bundle.grid.n + 1):
        fp.write(f"{float(t[i])!r},{float(w[i])!r},"
                 f"{float(mx[i])!r},{float(mn[i])!r}\n")


def bundle_to_json(bundle: PathBundle) -> str:
    doc = {
        "seed": bundle.seed,
        "path_index": bundle.path_index,
        "grid": {"T": bundle.grid.T, "n": bundle.grid.n},
        "levels": bundle.brownian.levels.tolist(),
        "jumps": {
            "times": bundle.jumps.times.tolist(),
            "marks": bundle.jumps.marks.tolist(),
            "mark_atom": bundle.jumps.mark_atom.tolist(),
            "levy_spec": [list(a) for a in bundle.jumps.levy_spec],
        },
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def bundle_from_json(text: str) -> PathBundle:
    doc = json.loads(text)
    grid = TimeGrid(doc["grid"]["T"], doc["grid"]["n"])
    levels = np.asarray(doc["levels"], dtype=float)
    brow = BrownianPath(levels=levels,
                        running_max=np.maximum.accumulate(levels),
                        running_min=np.minimum.accumulate(levels),
                        seed=int(doc["seed"]), path_index=int(doc["path_index"]))
    jt = np.asarray(doc["jumps"]["times"], dtype=float)
    step = np.minimum(np.ceil(jt / grid.dt).astype(np.int64) - 1, grid.n - 1)
    step = np.maximum(step, 0)
    jumps = JumpField(times=jt,
                      marks=np.asarray(doc["jumps"]["marks"], dtype=float),
                      mark_atom=np.asarray(doc["jumps"]["mark_atom"],
                                           dtype=np.int64),
                      step_index=step,
                      levy_spec=tuple(tuple(a) for a in doc["jumps"]["levy_spec"]),
                      seed=int(doc["seed"]), path_index=int(doc["path_index"]))
    return PathBundle(grid=grid, brownian=brow, jumps=jumps, seed=int(doc["seed"]))
