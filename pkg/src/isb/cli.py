"""Command-line interface: train, evaluate, make-data.

A run is described by a JSON config (nested key/value document, schema in
the README).  Presets fill task-specific defaults; any user key overrides
the preset.  All output files are written atomically (temp + rename), and a
killed run keeps the checkpoints of the last completed outer iteration.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import eval_bench
from .eval_bench import BenesModel, ToySpec, benes_grid, benes_nlpd_profile, emd, make_toy
from .isb_train import IsbConfig, generate_cache, isb_run
from .nn_drift import load_checkpoint
from .ot_resample import SinkhornConfig, SinkhornError, write_plan_csv
from .particle_filter import ObservationSet, load_observations_csv, write_observations_csv
from .sde_core import DiffusionSchedule, ObsNoiseSchedule, TimeGrid, simulate, write_trajectory_csv

TASKS = ("gauss_shift", "two_moons", "two_circles", "s_shape", "benes", "custom")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Validated run description; `to_dict`/`from_dict` round-trip exactly."""

    task: str = "gauss_shift"
    seed: int = 0
    out_dir: str = "out"
    n_outer: int = 3
    n_particles: int = 500
    grid_horizon: float = 1.0
    grid_steps: int = 50
    g: dict = field(default_factory=lambda: {"kind": "constant", "a": 2.0, "b": 2.0,
                                             "squared": False})
    kappa: dict = field(default_factory=lambda: {"kind": "constant", "a": 1.0, "b": 1.0,
                                                 "base": 1.25})
    ot: dict = field(default_factory=lambda: {"epsilon": 0.25, "marginal_tol": 1e-6,
                                              "max_iters": 30000, "log_domain": True})
    inner_iters: int = 5000
    batch_size: int = 256
    cache_refresh: int = 1000
    lr: float = 1e-3
    lr_schedule: str = "constant"
    hidden: tuple = (64, 64)
    activation: str = "silu"
    time_features: int = 16
    drift_init: str = "zero"
    loss_time_convention: str = "printed"
    filtering_enabled: bool = True
    obs_H: int = 1
    obs_weighting: str = "bootstrap_sum"
    obs_path: str = None
    no_observations: bool = False
    pi0_path: str = None
    piT_path: str = None
    emit_trajectories: bool = False
    emit_plots: bool = False

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.n_outer < 0 or self.n_particles < 1 or self.grid_steps < 2:
            raise ConfigError("n_outer >= 0, n_particles >= 1, grid_steps >= 2 required")
        if self.task == "custom":
            if not (self.pi0_path and self.piT_path):
                raise ConfigError("custom task requires pi0_path and piT_path")
            if self.obs_path is None and not self.no_observations:
                raise ConfigError(
                    "custom task requires obs_path or no_observations=true")

    # -- builders -----------------------------------------------------------

    def time_grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.grid_horizon, self.grid_steps)

    def isb_config(self) -> IsbConfig:
        g = DiffusionSchedule(self.g.get("kind", "constant"), self.g.get("a", 1.0),
                              self.g.get("b", self.g.get("a", 1.0)),
                              horizon=self.grid_horizon,
                              squared=self.g.get("squared", False))
        kap = ObsNoiseSchedule(self.kappa.get("kind", "constant"), self.kappa.get("a", 1.0),
                               self.kappa.get("b", self.kappa.get("a", 1.0)),
                               base=self.kappa.get("base", 1.25), n_iters=self.n_outer)
        ot = SinkhornConfig(
            epsilon=self.ot.get("epsilon", 0.25),
            max_iters=int(self.ot.get("max_iters", 30000)),
            marginal_tol=self.ot.get("marginal_tol", 1e-6),
            log_domain=self.ot.get("log_domain", True),
        )
        return IsbConfig(
            n_outer=self.n_outer, n_particles=self.n_particles, grid=self.time_grid(),
            g=g, kappa=kap, ot=ot, inner_iters=self.inner_iters,
            batch_size=self.batch_size, cache_refresh=self.cache_refresh, lr=self.lr,
            lr_schedule=self.lr_schedule, hidden=self.hidden, activation=self.activation,
            time_features=self.time_features, drift_init=self.drift_init,
            loss_time_convention=self.loss_time_convention, seed=self.seed,
            filtering_enabled=self.filtering_enabled,
        )


PRESETS = {
    "gauss_shift": {
        "n_outer": 3, "n_particles": 500, "grid_horizon": 1.0, "grid_steps": 50,
        "g": {"kind": "constant", "a": 2.0, "b": 2.0, "squared": False},
        "kappa": {"kind": "constant", "a": 1.0, "b": 1.0, "base": 1.25},
    },
    "two_circles": {
        "n_outer": 6, "n_particles": 1000, "grid_horizon": 0.99, "grid_steps": 100,
        "g": {"kind": "linear", "a": 0.001, "b": 1.0, "squared": True},
        "kappa": {"kind": "exponential", "a": 0.5, "b": 0.5, "base": 1.25},
    },
    "two_moons": {
        "n_outer": 6, "n_particles": 1000, "grid_horizon": 0.99, "grid_steps": 100,
        "g": {"kind": "linear", "a": 0.001, "b": 1.0, "squared": True},
        "kappa": {"kind": "exponential", "a": 1.0, "b": 1.0, "base": 1.25},
    },
    "s_shape": {
        "n_outer": 6, "n_particles": 1000, "grid_horizon": 0.99, "grid_steps": 100,
        "g": {"kind": "linear", "a": 0.001, "b": 1.0, "squared": True},
        # down-then-up annealing of kappa^2 from 4 to 1 and back
        "kappa": {"kind": "bilinear", "a": 2.0, "b": 1.0, "base": 1.25},
    },
    "benes": {
        "n_outer": 3, "n_particles": 1000, "grid_horizon": 11.97, "grid_steps": 120,
        "g": {"kind": "constant", "a": 1.0, "b": 1.0, "squared": False},
        "kappa": {"kind": "constant", "a": 0.7, "b": 0.7, "base": 1.25},
        "ot": {"epsilon": 0.5, "marginal_tol": 1e-6, "max_iters": 30000,
               "log_domain": True},
        "cache_refresh": 2500,
        "obs_H": 10,
    },
    "custom": {},
}

CIRCLE_OBS_TIME = 0.5
SHIFT_OBS_CENTROID = (5.0, 4.0)


def circle_observation_records():
    """Ten points evenly spaced on a radius-3 circle centred at (1.5, 0)."""
    angles = math.pi / 2 - np.arange(10) * 2 * math.pi / 10
    return [(CIRCLE_OBS_TIME, [1.5 + 3 * math.cos(a), 3 * math.sin(a)]) for a in angles]


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    task = doc.get("task", "gauss_shift")
    if task not in PRESETS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    merged = dict(PRESETS[task])
    merged.update(doc)
    cfg = RunConfig.from_dict(merged)
    out_env = os.environ.get("ISB_OUT_DIR")
    if out_env:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "out_dir": out_env})
    return cfg


def _read_samples_csv(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or not header[0].startswith("dim_"):
            raise ConfigError(f"{path}: expected header dim_0,...")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.asarray(rows, dtype=np.float64)


def _write_samples_csv(path: str, samples: np.ndarray) -> None:
    samples = np.atleast_2d(samples)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim_{j}" for j in range(samples.shape[1])])
        for row in samples:
            w.writerow([repr(float(v)) for v in row])
    os.replace(tmp, path)


def _pool_sampler(samples: np.ndarray):
    def sampler(rng, n):
        return samples[rng.integers(0, len(samples), n)]

    return sampler


def build_problem(cfg: RunConfig):
    """(pi0_sampler, piT_sampler, observations, reference_drift) for a task."""
    grid = cfg.time_grid()
    obs_kw = dict(sigma_base=cfg.kappa.get("a", 1.0), H=cfg.obs_H,
                  weighting_mode=cfg.obs_weighting)
    obs = ObservationSet.empty(**obs_kw)
    if cfg.obs_path:
        obs = load_observations_csv(cfg.obs_path, grid, **obs_kw)
    reference = None

    if cfg.task == "gauss_shift":
        pi0 = lambda rng, n: rng.normal(size=(n, 2))
        piT = lambda rng, n: rng.normal(size=(n, 2)) + np.array([10.0, 0.0])
        return pi0, piT, obs, reference

    if cfg.task in ("two_circles", "two_moons", "s_shape"):
        data = make_toy(ToySpec(cfg.task, max(4 * cfg.n_particles, 4000), seed=cfg.seed))
        pi0 = lambda rng, n: rng.normal(size=(n, 2))
        piT = _pool_sampler(data)
        if cfg.task == "two_circles" and not cfg.obs_path and not cfg.no_observations:
            obs = ObservationSet.from_records(circle_observation_records(), grid, **obs_kw)
        return pi0, piT, obs, reference

    if cfg.task == "benes":
        model = BenesModel()
        if not cfg.obs_path and not cfg.no_observations:
            obs = eval_bench.benes_observations(10, 1, cfg.seed, grid=grid,
                                                H=cfg.obs_H,
                                                sigma_base=cfg.kappa.get("a", 0.7))
        pi0 = lambda rng, n: np.full((n, 1), model.x0)
        phys_end = eval_bench.benes_marginal_time(grid.horizon, model)

        def piT(rng, n):
            z = eval_bench.sample_benes_marginal(n, phys_end, rng, x0=model.x0)
            return (model.shift + model.scale * z)[:, None]

        reference = lambda X, t: np.tanh(X)
        return pi0, piT, obs, reference

    # custom: boundary samples from CSV pools
    pi0 = _pool_sampler(_read_samples_csv(cfg.pi0_path))
    piT = _pool_sampler(_read_samples_csv(cfg.piT_path))
    return pi0, piT, obs, reference


def _atomic_json(path: str, doc) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _marginal_indices(K: int):
    return sorted({0, K // 4, K // 2, (3 * K) // 4, K - 1})


def _write_marginals(out_dir, traj, grid):
    for k in _marginal_indices(traj.shape[0]):
        _write_samples_csv(os.path.join(out_dir, f"marginal_k{k}.csv"), traj[k])


def _scatter_svg(path: str, points: np.ndarray, title: str) -> None:
    """Dependency-free scatter render of one marginal slice."""
    pts = np.atleast_2d(points)
    x, y = pts[:, 0], (pts[:, 1] if pts.shape[1] > 1 else np.zeros_like(pts[:, 0]))
    lo = min(x.min(), y.min()) - 1.0
    hi = max(x.max(), y.max()) + 1.0
    span = hi - lo
    size = 400.0

    def sx(v):
        return (v - lo) / span * size

    def sy(v):
        return size - (v - lo) / span * size

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}">',
        f'<title>{title}</title>',
        f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>',
    ]
    for xi, yi in zip(x, y):
        parts.append(f'<circle cx="{sx(xi):.2f}" cy="{sy(yi):.2f}" r="1.5" '
                     'fill="steelblue" fill-opacity="0.5"/>')
    parts.append("</svg>")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(parts))
    os.replace(tmp, path)


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        pi0, piT, obs, reference = build_problem(cfg)
        icfg = cfg.isb_config()
        f_net, b_net, diagnostics = isb_run(
            icfg, pi0, piT, obs=obs, reference_drift=reference,
            checkpoint_dir=cfg.out_dir)
        _atomic_json(os.path.join(cfg.out_dir, "diagnostics.json"),
                     {"config": cfg.to_dict(), "iterations": diagnostics})
        if cfg.n_outer == 0:
            from .nn_drift import save_checkpoint

            save_checkpoint(f_net, os.path.join(cfg.out_dir, "net_fwd_l0.json"))
            save_checkpoint(b_net, os.path.join(cfg.out_dir, "net_bwd_l0.json"))
        if cfg.emit_trajectories or cfg.emit_plots:
            grid = cfg.time_grid()
            rng = np.random.default_rng(cfg.seed + 9000)
            traj = simulate(f_net, lambda r: pi0(r, cfg.n_particles), grid,
                            icfg.g, rng)
            if cfg.emit_trajectories:
                _write_marginals(cfg.out_dir, traj, grid)
                write_trajectory_csv(os.path.join(cfg.out_dir, "trajectories.csv"),
                                     traj, grid)
            if cfg.emit_plots:
                for k in _marginal_indices(traj.shape[0]):
                    _scatter_svg(os.path.join(cfg.out_dir, f"marginal_k{k}.svg"),
                                 traj[k], f"marginal at index {k}")
        if getattr(args, "dump_plans", False):
            rng = np.random.default_rng(cfg.seed + 9001)
            cache = generate_cache("forward", f_net, lambda r: pi0(r, cfg.n_particles),
                                   obs, icfg, max(cfg.n_outer, 1), rng)
            for k, plan in cache.plans.items():
                write_plan_csv(os.path.join(cfg.out_dir, f"plan_k{k}.csv"), plan)
    except (SinkhornError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _latest_checkpoints(ckpt_dir: str):
    best = {}
    for name in os.listdir(ckpt_dir):
        if name.startswith("net_") and name.endswith(".json"):
            stem = name[:-5]
            direction, l_tag = stem.split("_")[1:3]
            best.setdefault(direction, []).append((int(l_tag[1:]), name))
    if "fwd" not in best:
        raise ConfigError(f"no forward checkpoints in {ckpt_dir}")
    out = {}
    for direction, entries in best.items():
        entries.sort()
        out[direction] = os.path.join(ckpt_dir, entries[-1][1])
    return out


def cmd_evaluate(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.metric == "emd" and args.samples:
            A = _read_samples_csv(args.samples)
            B = _read_samples_csv(args.against) if args.against else A
            doc = {"metric": "emd", "emd": emd(A, B),
                   "n_particles": int(len(A)), "seed": cfg.seed}
            print(json.dumps(doc, sort_keys=True))
            return EXIT_OK
        ckpts = _latest_checkpoints(args.checkpoint_dir or cfg.out_dir)
        f_net = load_checkpoint(ckpts["fwd"])
        pi0, piT, obs, _ = build_problem(cfg)
        icfg = cfg.isb_config()
        grid = cfg.time_grid()
        rng = np.random.default_rng(cfg.seed + 500)
        if args.metric == "nlpd":
            if cfg.task != "benes":
                print("nlpd requires the closed-form benchmark task", file=sys.stderr)
                return EXIT_CONFIG
            traj = simulate(f_net, lambda r: pi0(r, cfg.n_particles), grid, icfg.g, rng)
            doc = benes_nlpd_profile(traj, grid)
            doc.update({"metric": "nlpd", "n_particles": cfg.n_particles, "seed": cfg.seed})
            print(json.dumps(doc, sort_keys=True))
            return EXIT_OK
        if args.metric == "emd":
            traj = simulate(f_net, lambda r: pi0(r, cfg.n_particles), grid, icfg.g, rng)
            target = piT(np.random.default_rng(cfg.seed + 501), cfg.n_particles)
            doc = {"metric": "emd", "emd": emd(traj[-1], target),
                   "n_particles": cfg.n_particles, "seed": cfg.seed}
            print(json.dumps(doc, sort_keys=True))
            return EXIT_OK
        if args.metric == "ess":
            cache = generate_cache("forward", f_net, lambda r: pi0(r, cfg.n_particles),
                                   obs, icfg, max(cfg.n_outer, 1), rng)
            doc = {"metric": "ess",
                   "ess_per_obs_time": {str(k): v for k, v in sorted(cache.ess.items())},
                   "observation_times": [int(k) for k in sorted(cache.ess)],
                   "n_particles": cfg.n_particles, "seed": cfg.seed}
            print(json.dumps(doc, sort_keys=True))
            return EXIT_OK
        print(f"unknown metric {args.metric!r}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SinkhornError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


def cmd_make_data(args) -> int:
    try:
        if args.task not in TASKS or args.task == "custom":
            raise ConfigError(f"make-data task must be one of {TASKS[:-1]}")
        os.makedirs(args.out, exist_ok=True)
        rng = np.random.default_rng(args.seed)
        n = args.n
        if args.task == "benes":
            grid = benes_grid()
            model = BenesModel()
            pi0 = np.full((n, 1), model.x0)
            phys_end = eval_bench.benes_marginal_time(grid.horizon, model)
            z = eval_bench.sample_benes_marginal(n, phys_end, rng, x0=model.x0)
            piT = (model.shift + model.scale * z)[:, None]
            obs = eval_bench.benes_observations(10, 1, args.seed, grid=grid)
            write_observations_csv(os.path.join(args.out, "obs.csv"), obs.records)
        elif args.task == "gauss_shift":
            pi0 = rng.normal(size=(n, 2))
            piT = make_toy(ToySpec("gauss_shift", n, seed=args.seed))
        else:
            pi0 = rng.normal(size=(n, 2))
            piT = make_toy(ToySpec(args.task, n, seed=args.seed))
            if args.task == "two_circles":
                write_observations_csv(os.path.join(args.out, "obs.csv"),
                                       circle_observation_records())
        _write_samples_csv(os.path.join(args.out, "pi0.csv"), pi0)
        _write_samples_csv(os.path.join(args.out, "piT.csv"), piT)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="isb",
                                     description="observation-constrained diffusion bridges")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full bridge training loop")
    p_train.add_argument("-c", "--config", required=True)
    p_train.add_argument("--dump-plans", action="store_true",
                         help="dump transport plans of a final filtered pass")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("evaluate", help="metrics from trained checkpoints")
    p_eval.add_argument("-c", "--config", required=True)
    p_eval.add_argument("--metric", required=True, choices=["nlpd", "emd", "ess"])
    p_eval.add_argument("--checkpoint-dir", default=None)
    p_eval.add_argument("--samples", default=None,
                        help="sample CSV; with --metric emd compares to --against")
    p_eval.add_argument("--against", default=None)
    p_eval.set_defaults(fn=cmd_evaluate)

    p_data = sub.add_parser("make-data", help="write boundary/observation CSVs")
    p_data.add_argument("--task", required=True)
    p_data.add_argument("--out", required=True)
    p_data.add_argument("--n", type=int, default=1000)
    p_data.add_argument("--seed", type=int, default=0)
    p_data.set_defaults(fn=cmd_make_data)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
