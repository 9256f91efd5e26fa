"""Experiment driver: load or generate data, train, evaluate, aggregate.

A run is described by a JSON config::

    {
      "schema": "sbirr.experiment/1",
      "dataset": {"generator": {...}} | {"path": "dir-or-bundle.json"},
      "drop_times": [9],
      "methods": ["vanilla", "irr"],
      "irr": {"K": 10, "family": "lotka_volterra", ...},
      "metrics": ["emd", "mmd_sq"],
      "anchor_modes": ["one-time", "all"],
      "seeds": [0, 1, 2],
      "out": "results/lv"
    }

Generator datasets are re-simulated for every seed (the generator seed is
replaced by the run seed). ``drop_times`` removes zero-based observation
indices before the odd/even split.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import GeneratorSpec, generate, load_bundle, load_dataset, save_bundle, split_train_val
from .errors import InvalidParameterError, SchemaError
from .metrics import emd, mmd_sq
from .refinement import IRRConfig, impute_trajectories, run_irr, write_history
from .sde import SnapshotDataset, write_trajectories_csv

__all__ = [
    "SCHEMA",
    "ExperimentConfig",
    "load_config",
    "prepare_data",
    "evaluate",
    "run_seed",
    "run_experiment",
    "read_metrics",
    "summarize",
    "write_summary",
    "trajectory_svg",
    "report",
]

SCHEMA = "sbirr.experiment/1"
METHODS = ("vanilla", "irr")
METRICS = {"emd": emd, "mmd_sq": mmd_sq}
ANCHOR_MODES = ("one-time", "all")
METRIC_COLUMNS = ("seed", "method", "anchor_mode", "val_time", "emd", "mmd_sq")
# evaluation imputations draw from their own stream
EVAL_STREAM = 2

_KEYS = {"schema", "dataset", "drop_times", "methods", "irr", "metrics", "anchor_modes", "seeds", "out"}


def _as_list(v):
    return [v] if isinstance(v, (str, int)) else list(v)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    methods: tuple = ("vanilla", "irr")
    irr: IRRConfig = field(default_factory=IRRConfig)
    metrics: tuple = ("emd", "mmd_sq")
    anchor_modes: tuple = ("one-time", "all")
    seeds: tuple = (0,)
    out: str = "results"
    drop_times: tuple = ()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Validate a parsed config; raises SchemaError on any problem."""
        if not isinstance(d, dict):
            raise SchemaError("config must be a JSON object")
        unknown = set(d) - _KEYS
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        if d.get("schema") != SCHEMA:
            raise SchemaError(f"schema must be {SCHEMA!r}, got {d.get('schema')!r}")
        ds = d.get("dataset")
        if not isinstance(ds, dict) or len(ds) != 1 or not ({"generator", "path"} & set(ds)):
            raise SchemaError('dataset must be {"generator": {...}} or {"path": "..."}')
        if "generator" in ds:
            GeneratorSpec.from_dict(ds["generator"])
        methods = tuple(_as_list(d.get("methods", METHODS)))
        metrics = tuple(_as_list(d.get("metrics", tuple(METRICS))))
        modes = tuple(_as_list(d.get("anchor_modes", ANCHOR_MODES)))
        for name, got, allowed in (("method", methods, METHODS), ("metric", metrics, METRICS), ("anchor mode", modes, ANCHOR_MODES)):
            bad = [g for g in got if g not in allowed]
            if bad or not got:
                raise SchemaError(f"invalid {name} list {list(got)}; allowed: {list(allowed)}")
        seeds = _as_list(d.get("seeds", [0]))
        if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise SchemaError("seeds must be non-negative integers")
        irr = d.get("irr", {})
        if not isinstance(irr, dict):
            raise SchemaError("irr must be an object")
        if "seed" in irr:
            raise SchemaError("irr.seed is set per run; use the seeds list")
        try:
            irr_cfg = IRRConfig(**irr)
        except TypeError as exc:
            raise SchemaError(f"bad irr settings: {exc}") from exc
        except InvalidParameterError as exc:
            raise SchemaError(str(exc)) from exc
        drop = d.get("drop_times", [])
        if not all(isinstance(i, int) for i in drop):
            raise SchemaError("drop_times must be integers")
        return cls(
            dataset=copy.deepcopy(ds),
            methods=methods,
            irr=irr_cfg,
            metrics=metrics,
            anchor_modes=modes,
            seeds=tuple(seeds),
            out=str(d.get("out", "results")),
            drop_times=tuple(drop),
        )

    def to_dict(self):
        irr = self.irr.to_dict()
        irr.pop("seed")
        return {
            "schema": SCHEMA,
            "dataset": self.dataset,
            "drop_times": list(self.drop_times),
            "methods": list(self.methods),
            "irr": irr,
            "metrics": list(self.metrics),
            "anchor_modes": list(self.anchor_modes),
            "seeds": list(self.seeds),
            "out": self.out,
        }


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


def prepare_data(cfg: ExperimentConfig, seed: int):
    """Full dataset for one seed, after dropping ``cfg.drop_times``."""
    ds = cfg.dataset
    if "generator" in ds:
        spec = GeneratorSpec.from_dict({**ds["generator"], "seed": seed})
        data, _ = generate(spec)
    else:
        path = ds["path"]
        data = load_bundle(path) if os.path.isfile(path) else load_dataset(path)
    if cfg.drop_times:
        n = len(data)
        drop = {i % n for i in cfg.drop_times}
        data = data.subset([i for i in range(n) if i not in drop])
    return data


def evaluate(train: SnapshotDataset, val: SnapshotDataset, fwd, bwd, anchor_mode, metrics, seed):
    """Impute from the training data and score every validation time.

    Returns ``(rows, trajectories)``; each row is ``(val_time, {metric: value})``.
    Validation points only enter through the metric call.
    """
    anchors = [0] if anchor_mode == "one-time" else None
    tag = ANCHOR_MODES.index(anchor_mode)
    trajs = impute_trajectories(train, fwd, bwd, train.gamma, seed, (EVAL_STREAM, tag), anchors)
    rows = []
    for snap, t in zip(val.snapshots, val.times):
        cloud = np.array([tr.state_at(t) for tr in trajs])
        rows.append((t, {m: METRICS[m](cloud, snap.points) for m in metrics}))
    return rows, trajs


def run_seed(cfg: ExperimentConfig, seed: int, out=None):
    """Train and evaluate every method for one seed.

    Writes ``seed_<s>/`` with the dataset bundle, refinement histories and
    trajectory dumps when ``out`` is given. Returns metric rows as dicts.
    Errors carry ``seed`` and ``stage`` attributes.
    """
    stage = "data"
    try:
        data = prepare_data(cfg, seed)
        train, val = split_train_val(data)
        seed_dir = None
        if out is not None:
            seed_dir = os.path.join(out, f"seed_{seed}")
            os.makedirs(seed_dir, exist_ok=True)
            save_bundle(data, os.path.join(seed_dir, "data.json"))
        rows = []
        for method in cfg.methods:
            stage = method
            if method == "vanilla":
                irr_cfg = replace(cfg.irr, K=1, refine=False, seed=seed)
            else:
                irr_cfg = replace(cfg.irr, seed=seed)
            fwd, bwd, history = run_irr(train, irr_cfg)
            if seed_dir:
                write_history(os.path.join(seed_dir, f"{method}_history.jsonl"), history)
            for mode in cfg.anchor_modes:
                stage = f"{method}/evaluate/{mode}"
                scores, trajs = evaluate(train, val, fwd, bwd, mode, cfg.metrics, seed)
                if seed_dir:
                    write_trajectories_csv(os.path.join(seed_dir, f"{method}_{mode}_trajectories.csv"), trajs)
                for t, vals in scores:
                    rows.append(
                        {
                            "seed": seed,
                            "method": method,
                            "anchor_mode": mode,
                            "val_time": t,
                            "emd": vals.get("emd"),
                            "mmd_sq": vals.get("mmd_sq"),
                        }
                    )
    except Exception as exc:
        exc.seed = seed
        exc.stage = stage
        raise
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_metrics(path, rows):
    rows = sorted(rows, key=lambda r: (r["seed"], METHODS.index(r["method"]), r["anchor_mode"], r["val_time"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["seed"], r["method"], r["anchor_mode"], _fmt(r["val_time"]), _fmt(r["emd"]), _fmt(r["mmd_sq"])])


def _run_seed_job(args):
    cfg_dict, seed, out = args
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed, out)


def run_experiment(cfg: ExperimentConfig, out=None, workers=1):
    """Run all seeds and write ``metrics.csv`` plus ``config.json`` to ``out``.

    ``workers > 1`` runs seeds in separate processes; results are merged in
    seed order so the output does not depend on scheduling.
    """
    out = out or cfg.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
    if workers > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(cfg.to_dict(), s, out) for s in cfg.seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed_job, jobs))
    else:
        per_seed = [run_seed(cfg, s, out) for s in cfg.seeds]
    rows = [r for rs in per_seed for r in rs]
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    return rows


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------


def read_metrics(path):
    """Parse ``metrics.csv``; raises SchemaError on missing columns or no rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METRIC_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path} lacks columns {missing}")
        rows = []
        for r in reader:
            rows.append(
                {
                    "seed": int(r["seed"]),
                    "method": r["method"],
                    "anchor_mode": r["anchor_mode"],
                    "val_time": float(r["val_time"]),
                    "emd": float(r["emd"]) if r["emd"] else math.nan,
                    "mmd_sq": float(r["mmd_sq"]) if r["mmd_sq"] else math.nan,
                }
            )
    if not rows:
        raise SchemaError(f"{path} has no result rows")
    return rows


def summarize(rows):
    """Mean and population std over seeds per (method, anchor_mode, val_time)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["anchor_mode"], r["val_time"]), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (METHODS.index(k[0]) if k[0] in METHODS else 99, k[1], k[2])):
        g = groups[key]
        rec = {"method": key[0], "anchor_mode": key[1], "val_time": key[2], "n_seeds": len(g)}
        for m in METRICS:
            v = np.array([r[m] for r in g])
            rec[f"{m}_mean"] = float(v.mean())
            rec[f"{m}_std"] = float(v.std())
        out.append(rec)
    return out


def write_summary(path, summary):
    cols = ["method", "anchor_mode", "val_time", "n_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in summary:
            w.writerow([rec[c] if not isinstance(rec[c], float) else f"{rec[c]:.6g}" for c in cols])


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def trajectory_svg(paths, snapshots, width=480, height=480, max_paths=60) -> str:
    """Minimal SVG: first two coordinates of trajectories over snapshot clouds.

    ``paths`` is a list of ``(steps, d)`` arrays, ``snapshots`` a list of
    ``(n, d)`` arrays (one colour each).
    """
    paths = [np.asarray(p)[:, :2] for p in paths[:max_paths]]
    snaps = [np.asarray(s)[:, :2] for s in snapshots]
    allpts = np.concatenate(paths + snaps) if (paths or snaps) else np.zeros((1, 2))
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 20

    def xy(p):
        u = pad + (p[:, 0] - lo[0]) / span[0] * (width - 2 * pad)
        v = height - pad - (p[:, 1] - lo[1]) / span[1] * (height - 2 * pad)
        return u, v

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for p in paths:
        u, v = xy(p)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(u, v))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#888" stroke-opacity="0.5" stroke-width="0.8"/>')
    for i, s in enumerate(snaps):
        u, v = xy(s)
        col = _PALETTE[i % len(_PALETTE)]
        parts.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2" fill="{col}"/>' for a, b in zip(u, v))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(results_dir):
    """Write ``summary.csv`` and ``trajectories.svg`` into ``results_dir``."""
    from .sde import read_trajectories_csv

    metrics_path = os.path.join(results_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise SchemaError(f"no metrics.csv in {results_dir}")
    summary = summarize(read_metrics(metrics_path))
    write_summary(os.path.join(results_dir, "summary.csv"), summary)

    seed_dirs = sorted(
        (d for d in os.listdir(results_dir) if d.startswith("seed_")), key=lambda d: int(d.split("_")[1])
    )
    if seed_dirs:
        first = os.path.join(results_dir, seed_dirs[0])
        dumps = sorted(f for f in os.listdir(first) if f.endswith("_trajectories.csv"))
        # prefer the refined one-time-anchor dump for the quick look
        dumps.sort(key=lambda f: (not f.startswith("irr"), "one-time" not in f))
        if dumps and os.path.exists(os.path.join(first, "data.json")):
            trajs = read_trajectories_csv(os.path.join(first, dumps[0]))
            data = load_bundle(os.path.join(first, "data.json"))
            svg = trajectory_svg([t.states for t in trajs], [s.points for s in data.snapshots])
            with open(os.path.join(results_dir, "trajectories.svg"), "w") as fh:
                fh.write(svg)
    return summary
