"""Synthetic snapshot benchmarks and the odd/even train-validation split."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidParameterError, ProtocolError, SchemaError, SimulationDiverged
from .families import get_family
from .sde import Snapshot, SnapshotDataset, TimeGrid, integrate, rng_stream

__all__ = [
    "GeneratorSpec",
    "lotka_volterra_spec",
    "repressilator_spec",
    "vortex_spec",
    "generate",
    "split_train_val",
    "save_dataset",
    "load_dataset",
    "save_bundle",
    "load_bundle",
]

SYSTEMS = ("lotka_volterra", "repressilator", "vortex")


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a synthetic benchmark.

    ``init`` is either ``{"kind": "box", "low": [...], "high": [...]}``
    (independent uniforms) or ``{"kind": "disk", "center": [...],
    "radius": r}`` (uniform on a disk). ``pooled=True`` simulates one pool of
    ``total_particles`` paths and spreads them over the observation times;
    otherwise every time gets ``particles_per_time`` fresh paths.

    ``gamma_gen`` is the volatility of the simulated truth and ``gamma`` the
    volatility recorded in the dataset for inference.
    """

    system: str
    params: tuple
    init: dict
    n_times: int = 10
    particles_per_time: int = 50
    interval: float = 1.0
    gamma_gen: float = 0.01
    gamma: float = 0.1
    dt: float = 0.01
    seed: int = 0
    pooled: bool = False
    total_particles: int = 0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise InvalidParameterError(f"unknown system {self.system!r}")
        if self.n_times < 2:
            raise InvalidParameterError("need at least two observation times")
        if self.particles_per_time < 1 and not self.pooled:
            raise InvalidParameterError("particles_per_time must be >= 1")
        if self.pooled and self.total_particles < self.n_times:
            raise InvalidParameterError("pooled generation needs at least one particle per time")
        if not (self.interval > 0 and self.dt > 0 and self.gamma_gen >= 0 and self.gamma > 0):
            raise InvalidParameterError("interval, dt and gamma must be positive")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def replace(self, **kw) -> "GeneratorSpec":
        d = asdict(self)
        d.update(kw)
        return GeneratorSpec(**d)

    def to_dict(self):
        d = asdict(self)
        d["params"] = list(self.params)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(f"bad generator spec: {exc}") from exc


def lotka_volterra_spec(**kw) -> GeneratorSpec:
    base = dict(
        system="lotka_volterra",
        params=(1.0, 0.4, 0.1, 0.4),
        init={"kind": "box", "low": [5.0, 4.0], "high": [5.1, 4.1]},
        n_times=10,
        particles_per_time=50,
        interval=1.0,
    )
    base.update(kw)
    return GeneratorSpec(**base)


def repressilator_spec(**kw) -> GeneratorSpec:
    base = dict(
        system="repressilator",
        params=(10.0, 3.0, 1.0, 1.0),
        init={"kind": "box", "low": [1.0, 1.0, 2.0], "high": [1.1, 1.1, 2.1]},
        n_times=10,
        particles_per_time=50,
        interval=1.0,
    )
    base.update(kw)
    return GeneratorSpec(**base)


def vortex_spec(**kw) -> GeneratorSpec:
    """Constant-curl vortex standing in for a measured ocean-current field."""
    base = dict(
        system="vortex",
        params=(0.0, 0.0, 1.0, 0.3),
        init={"kind": "disk", "center": [1.0, 0.0], "radius": 0.05},
        n_times=9,
        interval=0.9,
        pooled=True,
        total_particles=1000,
    )
    base.update(kw)
    return GeneratorSpec(**base)


def _initial_states(init, n, rng):
    kind = init.get("kind")
    if kind == "box":
        low = np.asarray(init["low"], dtype=float)
        high = np.asarray(init["high"], dtype=float)
        return rng.uniform(low, high, size=(n, low.size))
    if kind == "disk":
        c = np.asarray(init["center"], dtype=float)
        r = float(init["radius"]) * np.sqrt(rng.uniform(size=n))
        phi = rng.uniform(0, 2 * np.pi, size=n)
        return c + np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    raise InvalidParameterError(f"unknown initial distribution {kind!r}")


def generate(spec: GeneratorSpec):
    """Simulate a benchmark and expose each particle at one time only.

    Returns
    -------
    dataset : SnapshotDataset
    truth : dict
        ``paths`` ``(n_particles, steps + 1, d)`` on the simulation grid,
        ``assignment`` (observation index of every particle) and ``times``.
        For diagnostics only.

    Raises
    ------
    SimulationDiverged
        If the true system blows up.
    """
    family = get_family(spec.system)
    drift = family.bind(family.params(spec.params))
    times = tuple(i * spec.interval for i in range(spec.n_times))
    steps_per = int(round(spec.interval / spec.dt))
    if not math.isclose(steps_per * spec.dt, spec.interval, rel_tol=1e-9):
        raise InvalidParameterError("interval must be a multiple of dt")
    total_steps = steps_per * (spec.n_times - 1)

    if spec.pooled:
        n_part = spec.total_particles
        assign = np.arange(n_part) % spec.n_times
        assign = assign[rng_stream(spec.seed, 1).permutation(n_part)]
    else:
        n_part = spec.n_times * spec.particles_per_time
        assign = np.repeat(np.arange(spec.n_times), spec.particles_per_time)

    x0 = _initial_states(spec.init, n_part, rng_stream(spec.seed, 0))
    d = x0.shape[1]
    if d != family.dim:
        raise InvalidParameterError("initial distribution dimension does not match the system")
    noise = np.empty((total_steps, n_part, d))
    for p in range(n_part):
        noise[:, p, :] = rng_stream(spec.seed, 2, p).standard_normal((total_steps, d))
    paths = integrate([(drift, total_steps)], x0, 0.0, spec.dt, spec.gamma_gen, noise, 1)
    paths = np.ascontiguousarray(np.swapaxes(paths, 0, 1))

    snaps = []
    for i in range(spec.n_times):
        who = np.flatnonzero(assign == i)
        snaps.append(Snapshot(i, paths[who, i * steps_per, :]))
    data = SnapshotDataset(TimeGrid(times, spec.dt), tuple(snaps), spec.gamma)
    truth = {"paths": paths, "assignment": assign, "times": spec.dt * np.arange(total_steps + 1)}
    return data, truth


def split_train_val(data: SnapshotDataset):
    """Odd/even split: train on times 1, 3, 5, ... (1-based), validate on the rest.

    Raises
    ------
    ProtocolError
        Unless the number of times is odd and at least 3.
    """
    n = len(data)
    if n < 3 or n % 2 == 0:
        raise ProtocolError(
            f"the split needs an odd number (>= 3) of times, got {n}; drop a time point first"
        )
    return data.subset(range(0, n, 2)), data.subset(range(1, n, 2))


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def save_dataset(data: SnapshotDataset, directory):
    """Write ``header.json`` plus ``snapshot_<i>.csv`` files."""
    os.makedirs(directory, exist_ok=True)
    header = {"d": data.dim, "gamma": data.gamma, "dt": data.grid.dt, "times": list(data.times)}
    with open(os.path.join(directory, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2)
    for i, snap in enumerate(data.snapshots):
        with open(os.path.join(directory, f"snapshot_{i}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{k}" for k in range(data.dim)])
            for row in snap.points:
                w.writerow([repr(float(v)) for v in row])


def load_dataset(directory) -> SnapshotDataset:
    try:
        with open(os.path.join(directory, "header.json")) as fh:
            header = json.load(fh)
        d = int(header["d"])
        arrays = []
        for i in range(len(header["times"])):
            with open(os.path.join(directory, f"snapshot_{i}.csv"), newline="") as fh:
                rows = list(csv.DictReader(fh))
            arrays.append(np.array([[float(r[f"x_{k}"]) for k in range(d)] for r in rows]))
    except (KeyError, json.JSONDecodeError) as exc:
        raise SchemaError(f"malformed dataset in {directory}: {exc}") from exc
    return SnapshotDataset.from_arrays(header["times"], arrays, header["gamma"], header.get("dt", 0.01))


def save_bundle(data: SnapshotDataset, path):
    """Single-file JSON variant for small datasets."""
    obj = {
        "d": data.dim,
        "gamma": data.gamma,
        "dt": data.grid.dt,
        "times": list(data.times),
        "snapshots": [s.points.tolist() for s in data.snapshots],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_bundle(path) -> SnapshotDataset:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed dataset bundle {path}: {exc}") from exc
    try:
        return SnapshotDataset.from_arrays(obj["times"], obj["snapshots"], obj["gamma"], obj.get("dt", 0.01))
    except KeyError as exc:
        raise SchemaError(f"dataset bundle {path} lacks {exc}") from exc
