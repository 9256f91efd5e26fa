"""Pairwise Schrödinger bridges by iterative proportional maximum likelihood.

Each consecutive pair of snapshots is bridged by alternating half-bridge
fits: simulate the current forward SDE from the first snapshot and regress a
backward drift on the reversed increments, then simulate that backward SDE
from the second snapshot and regress a new forward drift. Drifts are kernel
ridge regressors on ``(state, time)`` whose prior mean is the reference
drift (forward) or its negation (backward), so away from the data a fitted
bridge falls back to the reference dynamics. Each prior is clipped to the
range it takes on the regression inputs: a negated Lotka-Volterra field, for
one, blows up when extrapolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from .errors import InvalidParameterError, RegressionError
from .sde import (
    PiecewiseDrift,
    SnapshotDataset,
    rng_stream,
    simulate_paths,
    simulate_paths_backward,
    step_count,
)

__all__ = [
    "RegressorConfig",
    "KernelDrift",
    "PiecewiseDrift",
    "drift_regression",
    "greedy_match",
    "reanchor",
    "pin_paths",
    "ClippedDrift",
    "forward_backward_sb",
    "multi_marginal_sb",
]

_EIG_RTOL = 1e-10


@dataclass(frozen=True)
class RegressorConfig:
    """Kernel ridge settings.

    ``ridge`` multiplies the number of training points, i.e. the fit
    minimises ``mean |y - f|^2 + ridge * |f|_H^2``.
    """

    length_scale: float = 1.0
    ridge: float = 1e-3
    max_inducing: int = 512
    standardize: bool = True

    def __post_init__(self):
        if not (self.length_scale > 0 and self.ridge > 0 and self.max_inducing >= 1):
            raise InvalidParameterError("regressor settings must be positive")


ANCHOR_MODES = ("bridge", "terminal")


def _sq_exp(a, b, length_scale):
    k = cdist(a, b, "sqeuclidean")
    k *= -0.5 / length_scale**2
    return np.exp(k, out=k)


class KernelDrift:
    """Ridge predictor ``f(x, t) = k((x, s(t)), Z) @ coef``.

    ``s(t) = (t - time_origin) / time_span`` is the rescaled time input, and
    inputs are shifted/scaled by ``mean``/``scale`` before the kernel.
    """

    def __init__(
        self, centers, coef, length_scale, mean, scale, time_origin=0.0, time_span=1.0, use_time=True, prior=None
    ):
        self.centers = centers
        self.prior = prior
        self.coef = coef
        self.length_scale = length_scale
        self.mean = mean
        self.scale = scale
        self.time_origin = time_origin
        self.time_span = time_span
        self.use_time = use_time

    @property
    def dim(self):
        return self.coef.shape[1]

    def features(self, x, t):
        x = np.array(x, dtype=float, ndmin=2)
        if self.use_time:
            tt = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
            s = (tt - self.time_origin) / self.time_span
            x = np.column_stack([x, s])
        return (x - self.mean) / self.scale

    def __call__(self, x, t):
        out = _sq_exp(self.features(x, t), self.centers, self.length_scale) @ self.coef
        if self.prior is not None:
            out += self.prior(np.array(x, dtype=float, ndmin=2), t)
        return out


def drift_regression(
    x, t, targets, cfg=None, rng=None, time_origin=0.0, time_span=1.0, use_time=True, prior=None
):
    """Fit a kernel ridge drift on ``(state, time) -> target`` pairs.

    Uses a Nyström (subset-of-regressors) solve on at most
    ``cfg.max_inducing`` uniformly subsampled inducing points; when all
    points fit it is exact kernel ridge regression. The prior mean is zero,
    or the drift field ``prior`` if given (the kernel part then fits the
    residual ``targets - prior(x, t)``).

    Raises
    ------
    RegressionError
        If the linear solve fails.
    """
    cfg = cfg or RegressorConfig()
    x = np.array(x, dtype=float, ndmin=2)
    y = np.array(targets, dtype=float, ndmin=2)
    n = x.shape[0]
    if y.shape[0] != n:
        raise InvalidParameterError("inputs and targets must have equal counts")
    if prior is not None:
        y = y - prior(x, np.broadcast_to(np.asarray(t, dtype=float), (n,)))
    if use_time:
        tt = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        feats = np.column_stack([x, (tt - time_origin) / time_span])
    else:
        feats = x
    if cfg.standardize:
        mean = feats.mean(axis=0)
        scale = feats.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        mean = np.zeros(feats.shape[1])
        scale = np.ones(feats.shape[1])
    z = (feats - mean) / scale

    if n > cfg.max_inducing:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(n, size=cfg.max_inducing, replace=False))
        centers = z[idx]
    else:
        centers = z
    try:
        kmm = _sq_exp(centers, centers, cfg.length_scale)
        evals, evecs = linalg.eigh(kmm, driver="evd")
        keep = evals > _EIG_RTOL * evals[-1]
        proj = evecs[:, keep] / np.sqrt(evals[keep])
        # features are knm @ proj; form the normal equations in the m-space
        knm = _sq_exp(z, centers, cfg.length_scale)
        a = proj.T @ (knm.T @ knm) @ proj
        a = 0.5 * (a + a.T)
        a[np.diag_indices_from(a)] += n * cfg.ridge
        w = linalg.solve(a, proj.T @ (knm.T @ y), assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise RegressionError(f"kernel ridge solve failed: {exc}") from exc
    coef = proj @ w
    if not np.all(np.isfinite(coef)):
        raise RegressionError("kernel ridge solve produced non-finite coefficients")
    return KernelDrift(centers, coef, cfg.length_scale, mean, scale, time_origin, time_span, use_time, prior)


def greedy_match(src, dst):
    """Assign each ``src`` point a ``dst`` index by greedy nearest pairs.

    Pairs are taken in order of increasing distance; each destination is
    used at most ``ceil(len(src) / len(dst))`` times, so the assignment is
    one-to-one whenever ``len(dst) >= len(src)``.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n, m = len(src), len(dst)
    cap = -(-n // m)
    dist = cdist(src, dst, "sqeuclidean")
    order = np.argsort(dist, axis=None, kind="stable")
    out = np.full(n, -1)
    used = np.zeros(m, dtype=int)
    left = n
    for flat in order:
        i, j = divmod(int(flat), m)
        if out[i] >= 0 or used[j] >= cap:
            continue
        out[i] = j
        used[j] += 1
        left -= 1
        if left == 0:
            break
    return out


def reanchor(end_states, targets):
    """Replace simulated end states by matched target points."""
    return np.asarray(targets)[greedy_match(end_states, targets)]


class ClippedDrift:
    """``sign * drift`` clipped per coordinate to ``[lo, hi]``."""

    def __init__(self, drift, sign, lo, hi):
        self.drift = drift
        self.sign = sign
        self.lo = lo
        self.hi = hi

    @classmethod
    def fit(cls, drift, x, t, sign=1.0):
        """Bounds are the range of ``sign * drift`` over the inputs ``(x, t)``."""
        v = sign * np.asarray(drift(x, t), dtype=float)
        return cls(drift, sign, v.min(axis=0), v.max(axis=0))

    def __call__(self, x, t):
        return np.clip(self.sign * np.asarray(self.drift(x, t), dtype=float), self.lo, self.hi)


def pin_paths(paths, targets, end=-1, mode="bridge"):
    """Re-anchor simulated ``paths`` (steps + 1, n, d) in place at row ``end``.

    ``terminal`` only swaps the end state for its matched target point.
    ``bridge`` shifts every state by the end correction times a linear ramp
    that vanishes at the free end, which turns a Brownian path into a
    Brownian bridge pinned at the matched point.
    """
    if mode not in ANCHOR_MODES:
        raise InvalidParameterError(f"unknown anchor mode {mode!r}")
    target = reanchor(paths[end], targets)
    if mode == "terminal":
        paths[end] = target
        return paths
    ramp = np.linspace(0.0, 1.0, paths.shape[0])
    if end == 0:
        ramp = ramp[::-1]
    paths += ramp[:, None, None] * (target - paths[end])[None]
    paths[end] = target
    return paths


def forward_backward_sb(
    x_a,
    x_b,
    t_a,
    t_b,
    ref_drift,
    gamma,
    dt,
    ipml_iters=10,
    cfg=None,
    rng=None,
    anchor="bridge",
    ref_prior=True,
):
    """Forward and backward drifts bridging two snapshots.

    Parameters
    ----------
    x_a, x_b : (N_a, d), (N_b, d) arrays
        Snapshots at times ``t_a < t_b``.
    ref_drift : drift field
        Reference dynamics; drives the first forward simulation and, when
        ``ref_prior`` is set, serves (clipped) as the prior mean of both
        regressions.

    Returns
    -------
    (forward, backward) : KernelDrift
        Both take physical time (see :mod:`sbirr.sde`).
    """
    x_a = np.array(x_a, dtype=float, ndmin=2)
    x_b = np.array(x_b, dtype=float, ndmin=2)
    if x_a.shape[1] != x_b.shape[1]:
        raise InvalidParameterError("snapshots must share one dimension")
    if not t_b > t_a:
        raise InvalidParameterError("t_b must exceed t_a")
    if ipml_iters < 1:
        raise InvalidParameterError("ipml_iters must be >= 1")
    cfg = cfg or RegressorConfig()
    rng = rng if rng is not None else np.random.default_rng()
    steps = step_count(t_b - t_a, dt)
    times = t_a + dt * np.arange(steps + 1)
    span = t_b - t_a
    fwd = ref_drift
    bwd = None
    for _ in range(ipml_iters):
        paths = simulate_paths(fwd, x_a, t_a, steps, dt, gamma, rng)
        pin_paths(paths, x_b, -1, anchor)
        # reversed increments: from the state at times[j+1] back to times[j]
        xs = paths[1:].reshape(-1, paths.shape[-1])
        ts = np.repeat(times[1:], paths.shape[1])
        ys = ((paths[:-1] - paths[1:]) / dt).reshape(xs.shape)
        prior = ClippedDrift.fit(ref_drift, xs, ts, -1.0) if ref_prior else None
        bwd = drift_regression(xs, ts, ys, cfg, rng, t_a, span, prior=prior)

        paths = simulate_paths_backward(bwd, x_b, times[-1], steps, dt, gamma, rng)
        pin_paths(paths, x_a, 0, anchor)
        xs = paths[:-1].reshape(-1, paths.shape[-1])
        ts = np.repeat(times[:-1], paths.shape[1])
        ys = ((paths[1:] - paths[:-1]) / dt).reshape(xs.shape)
        prior = ClippedDrift.fit(ref_drift, xs, ts) if ref_prior else None
        fwd = drift_regression(xs, ts, ys, cfg, rng, t_a, span, prior=prior)
    return fwd, bwd


def multi_marginal_sb(data: SnapshotDataset, ref_drift, ipml_iters=10, cfg=None, seed=0, stream=()):
    """Bridge every consecutive snapshot pair independently.

    Pair ``i`` draws all its randomness from ``rng_stream(seed, *stream, i)``,
    so pairs can be solved in any order with identical results.

    Returns
    -------
    (forward, backward) : PiecewiseDrift
    """
    if len(data) < 2:
        raise InvalidParameterError("need at least two snapshots")
    fwd_segs, bwd_segs = [], []
    for i, (t_a, t_b) in enumerate(data.grid.segments()):
        f, b = forward_backward_sb(
            data.snapshots[i].points,
            data.snapshots[i + 1].points,
            t_a,
            t_b,
            ref_drift,
            data.gamma,
            data.grid.dt,
            ipml_iters,
            cfg,
            rng_stream(seed, *stream, i),
        )
        fwd_segs.append((t_a, t_b, f))
        bwd_segs.append((t_a, t_b, b))
    return PiecewiseDrift(fwd_segs, "forward"), PiecewiseDrift(bwd_segs, "backward")
