"""Iterative reference refinement around the multi-marginal bridge solver.

Each outer iteration ``k`` bridges all snapshot pairs against the current
reference drift, imputes one full-span trajectory per observation, and refits
the reference family to those trajectories by maximum likelihood. The first
reference is the zero drift (Brownian motion).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .bridge import RegressorConfig, multi_marginal_sb
from .errors import InvalidParameterError, SBIRRError
from .families import ParamVector, Zero, fit_mle, get_family, second_projection_loss
from .sde import SnapshotDataset, Trajectory, anchor_noise, empirical_kl, impute_paths, zero_drift

__all__ = [
    "IRRConfig",
    "RefinementState",
    "RefinementError",
    "impute_trajectories",
    "run_irr",
    "write_history",
    "read_history",
]

# stream tags keep the solver and imputation noise apart
SOLVE_STREAM = 0
IMPUTE_STREAM = 1


@dataclass(frozen=True)
class IRRConfig:
    """Settings of the outer loop.

    ``refine=False`` skips the maximum-likelihood step, which with ``K=1``
    is the plain piecewise bridge against a Brownian reference.
    ``warm_start`` seeds each fit with the previous iterate's parameters.
    """

    K: int = 10
    gamma: float = 0.1
    dt: float = 0.01
    family: str = "zero"
    ipml_iters: int = 10
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    lr: float = 0.05
    epochs: int = 20
    fit_method: str = "lbfgs"
    init_params: tuple | None = None
    network_seed: int = 0
    warm_start: bool = True
    refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise InvalidParameterError("K must be >= 1")
        if not (self.gamma > 0 and self.dt > 0):
            raise InvalidParameterError("gamma and dt must be positive")
        if isinstance(self.regressor, dict):
            object.__setattr__(self, "regressor", RegressorConfig(**self.regressor))

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["regressor"] = dict(vars(self.regressor))
        if d["init_params"] is not None:
            d["init_params"] = list(d["init_params"])
        return d


@dataclass
class RefinementState:
    """Record of one outer iteration.

    ``k = 0`` describes the initial zero reference, scored on the
    trajectories of the first iteration.
    """

    k: int
    params: ParamVector | None
    loss: float
    kl: float
    wall_time: float
    forward: object = field(default=None, repr=False)
    backward: object = field(default=None, repr=False)

    def to_json(self):
        return json.dumps(
            {
                "k": self.k,
                "family": None if self.params is None else self.params.family,
                "values": None if self.params is None else list(self.params.values),
                "loss": self.loss,
                "kl": self.kl,
                "wall_time": self.wall_time,
            }
        )


class RefinementError(SBIRRError):
    """An outer iteration failed; ``history`` holds the completed records."""

    def __init__(self, k, cause, history):
        self.k = k
        self.cause = cause
        self.history = history
        super().__init__(f"iteration {k} failed: {cause}")


def impute_trajectories(data: SnapshotDataset, fwd, bwd, gamma=None, seed=0, stream=(), anchors=None):
    """One full-span trajectory per observation.

    Particle ``n`` observed at grid index ``i`` draws its noise from
    ``rng_stream(seed, *stream, i, n)``. ``anchors`` restricts imputation to
    the given grid indices (default: all).
    """
    gamma = data.gamma if gamma is None else gamma
    anchors = range(len(data)) if anchors is None else anchors
    out = []
    for i in anchors:
        pts = data.snapshots[i].points
        nb, nf = anchor_noise(seed, stream, i, len(pts), data.grid, data.dim)
        try:
            t0, states = impute_paths(fwd, bwd, pts, i, data.grid, gamma, nb, nf)
        except SBIRRError as exc:
            exc.time_index = i
            raise
        for n in range(len(pts)):
            out.append(Trajectory(t0, data.grid.dt, states[:, n, :], anchor=(i, n)))
    return out


def _initial_params(family, data, cfg):
    if cfg.init_params is not None:
        return family.params(cfg.init_params)
    pts = np.concatenate([s.points for s in data.snapshots])
    return family.initial_params(pts, seed=cfg.network_seed)


def run_irr(data: SnapshotDataset, cfg: IRRConfig | None = None, keep_drifts=False):
    """Alternate bridge fitting and reference refinement ``cfg.K`` times.

    Returns
    -------
    forward, backward : PiecewiseDrift
        Drifts of the final iteration.
    history : list of RefinementState
        ``K + 1`` records; ``history[0]`` scores the zero reference.

    Raises
    ------
    RefinementError
        Wrapping any numerical failure, with the history so far attached.
    """
    cfg = cfg or IRRConfig()
    if len(data) < 2:
        raise InvalidParameterError("need at least two snapshots")
    data = data.with_settings(gamma=cfg.gamma, dt=cfg.dt)
    family = get_family(cfg.family, data.dim)
    zero = Zero(data.dim)
    theta = None
    init = _initial_params(family, data, cfg)
    ref = zero_drift
    history = []
    fwd = bwd = None
    for k in range(1, cfg.K + 1):
        tic = time.perf_counter()
        try:
            fwd, bwd = multi_marginal_sb(
                data, ref, cfg.ipml_iters, cfg.regressor, cfg.seed, (SOLVE_STREAM, k)
            )
            trajs = impute_trajectories(data, fwd, bwd, cfg.gamma, cfg.seed, (IMPUTE_STREAM, k))
            if len(trajs) != sum(data.counts):
                raise SBIRRError("trajectory count mismatch")
            if k == 1:
                history.append(
                    RefinementState(
                        0,
                        None,
                        second_projection_loss(zero, (), trajs, cfg.gamma),
                        empirical_kl(trajs, fwd, zero_drift, cfg.gamma),
                        0.0,
                    )
                )
            if cfg.refine:
                start = theta if (theta is not None and cfg.warm_start) else init
                theta = fit_mle(
                    family, start, trajs, cfg.gamma, cfg.lr, cfg.epochs, cfg.fit_method
                )
                ref = family.bind(theta)
                loss = second_projection_loss(family, theta, trajs, cfg.gamma)
            else:
                loss = second_projection_loss(zero, (), trajs, cfg.gamma)
            kl = empirical_kl(trajs, fwd, ref, cfg.gamma)
        except SBIRRError as exc:
            raise RefinementError(k, exc, history) from exc
        history.append(
            RefinementState(
                k,
                theta,
                loss,
                kl,
                time.perf_counter() - tic,
                fwd if keep_drifts else None,
                bwd if keep_drifts else None,
            )
        )
    return fwd, bwd, history


def write_history(path, history):
    """JSON lines, one record per outer iteration."""
    with open(path, "w") as fh:
        for st in history:
            fh.write(st.to_json() + "\n")


def read_history(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
