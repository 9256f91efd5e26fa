"""Time grids, snapshot data, trajectories and Euler-Maruyama simulation.

Drift convention
----------------
A drift field is any callable ``drift(x, t)`` mapping an ``(n, d)`` array of
states and a time (scalar or ``(n,)`` array) to an ``(n, d)`` array of
velocities. Forward and backward drifts share the *physical* time argument.
One forward step from ``x`` at time ``t`` is::

    x_next = x + drift(x, t) * dt + sqrt(gamma * dt) * xi

and one backward step, moving from time ``t`` to ``t - dt``, is::

    x_prev = x + drift_back(x, t) * dt + sqrt(gamma * dt) * xi

so ``drift_back`` is the velocity of the time-reversed process, indexed by
the physical time of the state it is applied to. The bridge solver fits
backward drifts with the same convention.

Observation indices are zero-based throughout the package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidParameterError, SimulationDiverged

DriftField = Callable[[np.ndarray, "float | np.ndarray"], np.ndarray]

#: Any state coordinate larger than this aborts a simulation.
DIVERGENCE_BOUND = 1e12

_STEP_RTOL = 1e-9


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Streams for distinct keys are independent, so work can be split across
    particles, pairs or iterations in any order without changing results.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def zero_drift(x, t=None):
    return np.zeros_like(np.asarray(x, dtype=float))


class ConstantDrift:
    """Spatially and temporally constant velocity."""

    def __init__(self, velocity):
        self.velocity = np.asarray(velocity, dtype=float)

    def __call__(self, x, t=None):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.velocity, x.shape).copy()


def step_count(span: float, dt: float) -> int:
    """Smallest ``L >= 1`` with ``L * dt >= span`` (up to float round-off)."""
    if span <= 0 or dt <= 0:
        raise InvalidParameterError("span and dt must be positive")
    return max(1, math.ceil(span / dt * (1.0 - _STEP_RTOL)))


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation times plus a simulation step."""

    times: tuple
    dt: float = 0.01

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 1:
            raise InvalidParameterError("a time grid needs at least one time")
        if not all(math.isfinite(t) for t in times):
            raise InvalidParameterError("times must be finite")
        if times[0] < 0:
            raise InvalidParameterError("times must start at a non-negative value")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidParameterError("times must be strictly increasing")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InvalidParameterError("dt must be positive and finite")

    def __len__(self):
        return len(self.times)

    @property
    def steps(self) -> tuple:
        """Per-segment step counts ``L_i``."""
        return tuple(step_count(b - a, self.dt) for a, b in zip(self.times, self.times[1:]))

    def segments(self):
        return list(zip(self.times[:-1], self.times[1:]))


@dataclass(frozen=True)
class Snapshot:
    time_index: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, ndmin=2)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidParameterError("a snapshot needs a non-empty (N, d) array")
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("snapshot points must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class SnapshotDataset:
    """One snapshot per grid time and the (known) volatility."""

    grid: TimeGrid
    snapshots: tuple
    gamma: float = 0.1

    def __post_init__(self):
        snaps = tuple(
            s if isinstance(s, Snapshot) else Snapshot(i, s) for i, s in enumerate(self.snapshots)
        )
        object.__setattr__(self, "snapshots", snaps)
        if len(snaps) != len(self.grid):
            raise InvalidParameterError(
                f"{len(snaps)} snapshots for {len(self.grid)} grid times"
            )
        if len({s.dim for s in snaps}) != 1:
            raise InvalidParameterError("snapshots must share one dimension")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidParameterError("gamma must be positive and finite")

    @classmethod
    def from_arrays(cls, times, arrays, gamma=0.1, dt=0.01):
        return cls(TimeGrid(tuple(times), dt), tuple(Snapshot(i, a) for i, a in enumerate(arrays)), gamma)

    @property
    def dim(self):
        return self.snapshots[0].dim

    @property
    def times(self):
        return self.grid.times

    @property
    def counts(self):
        return [len(s) for s in self.snapshots]

    def __len__(self):
        return len(self.snapshots)

    def with_settings(self, gamma=None, dt=None) -> "SnapshotDataset":
        grid = self.grid if dt is None else TimeGrid(self.grid.times, dt)
        return SnapshotDataset(grid, self.snapshots, self.gamma if gamma is None else gamma)

    def subset(self, indices: Sequence[int]) -> "SnapshotDataset":
        idx = list(indices)
        grid = TimeGrid(tuple(self.grid.times[i] for i in idx), self.grid.dt)
        snaps = tuple(Snapshot(j, self.snapshots[i].points) for j, i in enumerate(idx))
        return SnapshotDataset(grid, snaps, self.gamma)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled path; ``states[j]`` sits at ``start_time + j * dt``."""

    start_time: float
    dt: float
    states: np.ndarray
    anchor: tuple | None = None

    def __post_init__(self):
        s = np.array(self.states, dtype=float)
        if s.ndim != 2:
            raise InvalidParameterError("trajectory states must be (L+1, d)")
        s.flags.writeable = False
        object.__setattr__(self, "states", s)

    def __len__(self):
        return self.states.shape[0]

    @property
    def times(self):
        return self.start_time + self.dt * np.arange(len(self))

    def state_at(self, t: float) -> np.ndarray:
        """State at the discrete step nearest to ``t``."""
        j = int(np.clip(np.rint((t - self.start_time) / self.dt), 0, len(self) - 1))
        return self.states[j]


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


def _check_step(x, step):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > DIVERGENCE_BOUND:
        raise SimulationDiverged(step)


def integrate(schedule, x0, t0, dt, gamma, noise, direction=1):
    """Euler-Maruyama over a schedule of ``(drift, n_steps)`` segments.

    Parameters
    ----------
    schedule : list of (drift, int)
        Drift used for each consecutive block of steps.
    x0 : (n, d) array
    t0 : float
        Physical time of ``x0``.
    noise : (total_steps, n, d) array of standard normals
    direction : +1 for forward in time, -1 for backward.

    Returns
    -------
    (total_steps + 1, n, d) array of states in *integration* order.
    """
    if dt <= 0:
        raise InvalidParameterError("dt must be positive")
    if gamma < 0:
        raise InvalidParameterError("gamma must be non-negative")
    x = np.array(x0, dtype=float, ndmin=2)
    total = sum(n for _, n in schedule)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (total,) + x.shape:
        raise InvalidParameterError(f"noise shape {noise.shape} != {(total,) + x.shape}")
    out = np.empty((total + 1,) + x.shape)
    out[0] = x
    sd = math.sqrt(gamma * dt)
    j = 0
    for drift, n_steps in schedule:
        for _ in range(n_steps):
            t = t0 + direction * j * dt
            x = x + drift(x, t) * dt + sd * noise[j]
            j += 1
            _check_step(x, j)
            out[j] = x
    return out


def standard_noise(rng: np.random.Generator, steps: int, n: int, d: int) -> np.ndarray:
    return rng.standard_normal((steps, n, d))


def simulate_paths(drift, x0, t_start, steps, dt, gamma, rng=None, noise=None):
    """Batched forward simulation; returns ``(steps + 1, n, d)`` states."""
    x0 = np.array(x0, dtype=float, ndmin=2)
    if noise is None:
        noise = standard_noise(rng if rng is not None else np.random.default_rng(), steps, *x0.shape)
    return integrate([(drift, steps)], x0, t_start, dt, gamma, noise, 1)


def simulate_paths_backward(drift_back, x_end, t_end, steps, dt, gamma, rng=None, noise=None):
    """Batched backward simulation; returns states in increasing physical time."""
    x_end = np.array(x_end, dtype=float, ndmin=2)
    if noise is None:
        noise = standard_noise(rng if rng is not None else np.random.default_rng(), steps, *x_end.shape)
    return integrate([(drift_back, steps)], x_end, t_end, dt, gamma, noise, -1)[::-1]


def simulate_forward(drift, x0, t_start, steps, dt, gamma, rng) -> Trajectory:
    """Simulate one path forward from ``x0`` at ``t_start``.

    Raises
    ------
    SimulationDiverged
        If any state becomes non-finite or exceeds ``DIVERGENCE_BOUND``.
    """
    if steps < 0:
        raise InvalidParameterError("steps must be >= 0")
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    states = simulate_paths(drift, x0, t_start, steps, dt, gamma, rng)
    return Trajectory(t_start, dt, states[:, 0, :])


def simulate_backward(drift_back, x_end, t_end, steps, dt, gamma, rng) -> Trajectory:
    """Simulate one path backward from ``x_end`` at ``t_end``.

    The returned trajectory is ordered by increasing physical time and ends
    at ``x_end``.
    """
    if steps < 0:
        raise InvalidParameterError("steps must be >= 0")
    x_end = np.asarray(x_end, dtype=float).reshape(1, -1)
    states = simulate_paths_backward(drift_back, x_end, t_end, steps, dt, gamma, rng)
    return Trajectory(t_end - steps * dt, dt, states[:, 0, :])


class PiecewiseDrift:
    """Concatenation of per-segment drifts over consecutive grid intervals.

    Evaluation dispatches on half-open intervals ``[t_lo, t_hi)``; the last
    segment is closed and times outside the span use the nearest segment.
    """

    def __init__(self, segments, direction="forward"):
        if direction not in ("forward", "backward"):
            raise InvalidParameterError("direction must be 'forward' or 'backward'")
        segments = [(float(lo), float(hi), f) for lo, hi, f in segments]
        for (_, hi, _), (lo, _, _) in zip(segments, segments[1:]):
            if not math.isclose(hi, lo):
                raise InvalidParameterError("segments must tile the time span without gaps")
        self.segments = segments
        self.direction = direction
        self._bounds = np.array([hi for _, hi, _ in segments[:-1]])

    def __len__(self):
        return len(self.segments)

    def segment(self, i):
        return self.segments[i][2]

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        if np.ndim(t) == 0:
            i = int(np.searchsorted(self._bounds, t, side="right"))
            return self.segments[i][2](x, t)
        t = np.asarray(t, dtype=float)
        which = np.searchsorted(self._bounds, t, side="right")
        out = np.empty_like(x)
        for i in np.unique(which):
            m = which == i
            out[m] = self.segments[i][2](x[m], t[m])
        return out


def _full_span_schedule(forward, backward, obs_index, grid):
    steps = grid.steps
    back = [(backward.segment(i), steps[i]) for i in range(obs_index - 1, -1, -1)]
    fwd = [(forward.segment(i), steps[i]) for i in range(obs_index, len(steps))]
    return back, fwd


def impute_paths(forward, backward, obs, obs_index, grid, gamma, noise_back, noise_fwd):
    """Batched full-span paths through observations at one grid time.

    ``noise_back`` has shape ``(sum of backward steps, n, d)`` and
    ``noise_fwd`` ``(sum of forward steps, n, d)``. Returns ``(start_time,
    states)`` with states of shape ``(1 + sum(grid.steps), n, d)`` ordered by
    increasing time; the anchor row equals ``obs`` exactly.
    """
    obs = np.array(obs, dtype=float, ndmin=2)
    back, fwd = _full_span_schedule(forward, backward, obs_index, grid)
    t_obs = grid.times[obs_index]
    n_back = sum(n for _, n in back)
    before = integrate(back, obs, t_obs, grid.dt, gamma, noise_back, -1)[::-1]
    after = integrate(fwd, obs, t_obs, grid.dt, gamma, noise_fwd, 1)
    states = np.concatenate([before, after[1:]], axis=0)
    states[n_back] = obs
    return t_obs - n_back * grid.dt, states


def anchor_noise(seed, keys, obs_index, n_obs, grid, d, first_particle=0):
    """Per-particle noise for full-span imputation at one grid time.

    Particle ``p`` draws from ``rng_stream(seed, *keys, obs_index, p)``:
    first its backward block, then its forward block.
    """
    steps = grid.steps
    nb = sum(steps[:obs_index])
    nf = sum(steps[obs_index:])
    back = np.empty((nb, n_obs, d))
    fwd = np.empty((nf, n_obs, d))
    for p in range(n_obs):
        rng = rng_stream(seed, *keys, obs_index, first_particle + p)
        back[:, p, :] = rng.standard_normal((nb, d))
        fwd[:, p, :] = rng.standard_normal((nf, d))
    return back, fwd


def concat_full_trajectory(forward, backward, obs, obs_index, grid, gamma, rng) -> Trajectory:
    """Full-span trajectory through a single observation.

    Simulates backward over segments ``obs_index - 1, ..., 0`` with the
    backward drift and forward over ``obs_index, ..., I - 2`` with the
    forward drift, each segment for its ``L_i`` steps, and joins the two
    halves at the observation.
    """
    obs = np.asarray(obs, dtype=float).reshape(1, -1)
    steps = grid.steps
    nb, nf = sum(steps[:obs_index]), sum(steps[obs_index:])
    d = obs.shape[1]
    noise_b = rng.standard_normal((nb, 1, d))
    noise_f = rng.standard_normal((nf, 1, d))
    t0, states = impute_paths(forward, backward, obs, obs_index, grid, gamma, noise_b, noise_f)
    return Trajectory(t0, grid.dt, states[:, 0, :], anchor=(obs_index, None))


# --------------------------------------------------------------------------
# Likelihoods
# --------------------------------------------------------------------------


def gaussian_step_loglik(x_next, x_prev, drift_val, dt, gamma) -> float:
    """Log-density of one Euler-Maruyama transition."""
    if not gamma > 0:
        raise InvalidParameterError("gamma must be positive for a transition density")
    if not dt > 0:
        raise InvalidParameterError("dt must be positive")
    r = np.asarray(x_next, float) - np.asarray(x_prev, float) - np.asarray(drift_val, float) * dt
    d = r.shape[-1]
    var = gamma * dt
    return float(-0.5 * d * math.log(2 * math.pi * var) - np.sum(r * r) / (2 * var))


def path_loglik(traj: Trajectory, drift, gamma) -> float:
    """Sum of Gaussian transition log-densities along a trajectory."""
    if len(traj) < 2:
        raise InvalidParameterError("path likelihood needs at least two states")
    if not gamma > 0:
        raise InvalidParameterError("gamma must be positive for a transition density")
    x = traj.states
    t = traj.times[:-1]
    b = drift(x[:-1], t)
    r = x[1:] - x[:-1] - b * traj.dt
    var = gamma * traj.dt
    n, d = r.shape
    return float(-0.5 * n * d * math.log(2 * math.pi * var) - np.sum(r * r) / (2 * var))


def empirical_kl(trajs: Sequence[Trajectory], drift_q, drift_p, gamma) -> float:
    """Discretised Girsanov estimate of KL(q || p) from paths sampled under q.

    Mean over trajectories of ``sum_j |b_q - b_p|^2 dt / (2 gamma)``,
    evaluated at the left end point of every step.
    """
    if len(trajs) == 0:
        raise InvalidParameterError("need at least one trajectory")
    if not gamma > 0:
        raise InvalidParameterError("gamma must be positive")
    total = 0.0
    for tr in trajs:
        x = tr.states[:-1]
        t = tr.times[:-1]
        diff = drift_q(x, t) - drift_p(x, t)
        total += float(np.sum(diff * diff)) * tr.dt / (2 * gamma)
    return total / len(trajs)


# --------------------------------------------------------------------------
# Trajectory dump
# --------------------------------------------------------------------------


def write_trajectories_csv(path, trajs: Iterable[Trajectory]):
    """Write ``traj_id, anchor_time_index, step, time, x_0 ... x_{d-1}`` rows."""
    trajs = list(trajs)
    d = trajs[0].states.shape[1] if trajs else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "anchor_time_index", "step", "time"] + [f"x_{k}" for k in range(d)])
        for tid, tr in enumerate(trajs):
            anchor = "" if tr.anchor is None else tr.anchor[0]
            for j, (t, s) in enumerate(zip(tr.times, tr.states)):
                w.writerow([tid, anchor, j, repr(float(t))] + [repr(float(v)) for v in s])


def read_trajectories_csv(path):
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            tid = int(rec["traj_id"])
            xs = [float(v) for k, v in rec.items() if k.startswith("x_")]
            anchor = rec["anchor_time_index"]
            rows.setdefault(tid, {"anchor": int(anchor) if anchor else None, "t": [], "x": []})
            rows[tid]["t"].append(float(rec["time"]))
            rows[tid]["x"].append(xs)
    out = []
    for tid in sorted(rows):
        r = rows[tid]
        t = r["t"]
        dt = t[1] - t[0] if len(t) > 1 else 0.0
        anchor = None if r["anchor"] is None else (r["anchor"], None)
        out.append(Trajectory(t[0], dt, np.array(r["x"]), anchor))
    return out
