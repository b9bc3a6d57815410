"""Mean-matching losses, trajectory caches and the outer bridge loop.

Training alternates two half-bridge regressions.  A forward cache generated
by drift f trains the reverse drift b against the printed residual

    b(x_{k+1}, t_{k+1}) D - x_{k+1} - f(x_{k+1}, t_k) D + x_k + f(x_k, t_k) D,

whose minimizer is b = f - g^2 grad-log-density at the later point; the
reverse-time simulation in sde_core integrates exactly that drift.  At
observation times the source term is coupled through the cached transport
plan, (x_k + f D) -> sum_n T[i, n] (x_k^n + f(x_k^n) D).

The backward cache (generated by the reverse-time simulation of b, filtered
the same way) trains f with the time-mirrored residual

    f(z_k, t_k) D + z_k - b(z_k, te) D - z_{k+1} + b(z_{k+1}, te) D,

with te the backward source time t_{k+1}; its coupled variant replaces
(z_{k+1} - b D) by the plan average.  The mirror is what makes the trained f
the time reversal of the backward dynamics; swapping symbols inside the
forward residual instead trains the negated drift and destroys the
fixed point.

A pair becomes an observation term exactly when its generated member was
resampled, because the cached generated slice equals the plan average of the
raw Euler step: forward pair (k, k+1) couples through the plan at k+1,
backward pair (k, k+1) through the plan at k.  Cached plans are constants
during optimization; gradients flow only into the trainee network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Var
from .nn_drift import DriftNet, OptimizerState, loss_gradient, optimizer_step, save_checkpoint
from .ot_resample import SinkhornConfig, TransportPlan
from .particle_filter import ObservationSet, filter_hook
from .sde_core import DiffusionSchedule, ObsNoiseSchedule, ParticleEnsemble, TimeGrid, simulate, simulate_backward

__all__ = [
    "IsbConfig",
    "TrajectoryCache",
    "loss_nobs",
    "loss_obs",
    "backward_loss_nobs",
    "backward_loss_obs",
    "full_loss",
    "full_loss_gradient",
    "generate_cache",
    "train_half_bridge",
    "isb_run",
    "control_cost",
]


@dataclass
class TrajectoryCache:
    """Filtered trajectories plus the transport plans at observation indices.

    `states` holds post-resampling slices; `plans` and `ess` are keyed by the
    grid index at which filtering happened.
    """

    states: np.ndarray  # (K, N, d)
    plans: dict  # time_index -> TransportPlan
    ess: dict  # time_index -> float
    direction: str  # 'forward' | 'backward'
    isb_iteration: int = 0
    times: np.ndarray = None  # grid times, attached at generation

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class IsbConfig:
    """Everything one bridge run needs; defaults follow the desk scale
    (100 steps of 0.01, 1000 particles)."""

    n_outer: int = 3
    n_particles: int = 1000
    grid: TimeGrid = field(default_factory=lambda: TimeGrid.uniform(1.0, 101))
    g: DiffusionSchedule = field(default_factory=lambda: DiffusionSchedule("constant", 1.0))
    kappa: ObsNoiseSchedule = field(default_factory=lambda: ObsNoiseSchedule("constant", 1.0))
    ot: SinkhornConfig = field(default_factory=SinkhornConfig)
    inner_iters: int = 5000
    batch_size: int = 256
    cache_refresh: int = 1000
    lr: float = 1e-3
    lr_schedule: str = "constant"  # 'constant' | 'cosine'
    hidden: tuple = (64, 64)
    activation: str = "silu"
    time_features: int = 16
    drift_init: str = "zero"  # 'zero' | path to a checkpoint
    loss_time_convention: str = "printed"  # 'printed' | 'shifted'
    seed: int = 0
    filtering_enabled: bool = True

    def make_net(self, d: int, seed: int) -> DriftNet:
        if self.drift_init == "zero":
            return DriftNet.create(d, hidden=self.hidden, activation=self.activation,
                                   time_features=self.time_features, init="zero", seed=seed)
        from .nn_drift import load_checkpoint

        return load_checkpoint(self.drift_init)


# -- loss functions ----------------------------------------------------------


def _gen_time(direction, times, k, convention):
    """Evaluation time of the frozen drift at the generated-slice argument."""
    if direction == "forward":
        return times[k] if convention == "printed" else times[k + 1]
    return times[k + 1] if convention == "printed" else times[k]


def loss_nobs(b_net, f_net, x_k, x_k1, t_k, t_k1, delta, convention="printed"):
    """Forward mean-matching loss away from observations (batch mean)."""
    x_k = np.atleast_2d(x_k)
    x_k1 = np.atleast_2d(x_k1)
    t_gen = t_k if convention == "printed" else t_k1
    r = (b_net(x_k1, t_k1) * delta - x_k1 - f_net(x_k1, t_gen) * delta
         + x_k + f_net(x_k, t_k) * delta)
    return float((r * r).sum() / x_k.shape[0])


def loss_obs(b_net, f_net, X_k, x_k1, rows, plan: TransportPlan, t_k, t_k1, delta,
             convention="printed"):
    """Forward loss at an observation time: the source term is the
    plan-coupled average over the full slice X_k."""
    X_k = np.atleast_2d(X_k)
    x_k1 = np.atleast_2d(x_k1)
    if plan.n != X_k.shape[0]:
        raise ValueError("plan size does not match the cached slice")
    t_gen = t_k if convention == "printed" else t_k1
    coupled = plan.transform @ (X_k + f_net(X_k, t_k) * delta)
    r = (b_net(x_k1, t_k1) * delta - x_k1 - f_net(x_k1, t_gen) * delta
         + coupled[np.asarray(rows)])
    return float((r * r).sum() / x_k1.shape[0])


def backward_loss_nobs(f_net, b_net, z_k, z_k1, t_k, t_k1, delta, convention="printed"):
    """Mirrored loss training f from a backward pair (batch mean)."""
    z_k = np.atleast_2d(z_k)
    z_k1 = np.atleast_2d(z_k1)
    t_gen = t_k1 if convention == "printed" else t_k
    r = (f_net(z_k, t_k) * delta + z_k - b_net(z_k, t_gen) * delta
         - z_k1 + b_net(z_k1, t_k1) * delta)
    return float((r * r).sum() / z_k.shape[0])


def backward_loss_obs(f_net, b_net, Z_k1, z_k, rows, plan: TransportPlan, t_k, t_k1, delta,
                      convention="printed"):
    """Mirrored loss when the generated backward slice z_k was resampled;
    the plan couples the raw step out of the source slice Z_{k+1}."""
    Z_k1 = np.atleast_2d(Z_k1)
    z_k = np.atleast_2d(z_k)
    if plan.n != Z_k1.shape[0]:
        raise ValueError("plan size does not match the cached slice")
    t_gen = t_k1 if convention == "printed" else t_k
    coupled = plan.transform @ (Z_k1 - b_net(Z_k1, t_k1) * delta)
    r = (f_net(z_k, t_k) * delta + z_k - b_net(z_k, t_gen) * delta
         - coupled[np.asarray(rows)])
    return float((r * r).sum() / z_k.shape[0])


class _HalfBridgeTables:
    """Precomputed frozen-drift terms so a training step only evaluates the
    trainee.  residual[i] = trainee(gen[k, i], t_gen[k]) * delta[k] + const[k, i]."""

    def __init__(self, direction, cache: TrajectoryCache, frozen, grid: TimeGrid,
                 convention="printed"):
        states = cache.states
        K = states.shape[0]
        times = grid.times
        deltas = grid.deltas
        self.direction = direction
        self.deltas = deltas
        if direction == "forward":
            self.gen = states[1:]
            self.t_gen = times[1:]
            const = np.empty_like(self.gen)
            for k in range(K - 1):
                d_k = deltas[k]
                f_src = frozen(states[k], times[k])
                f_gen = frozen(states[k + 1], _gen_time("forward", times, k, convention))
                src = states[k] + f_src * d_k
                # resampling replaced the generated slice x_{k+1} by the plan
                # average of the raw step, so the source term couples through
                # the plan stored at that generated index
                if (k + 1) in cache.plans:
                    src = cache.plans[k + 1].transform @ src
                const[k] = -states[k + 1] - f_gen * d_k + src
        elif direction == "backward":
            self.gen = states[:-1]
            self.t_gen = times[:-1]
            const = np.empty_like(self.gen)
            for k in range(K - 1):
                d_k = deltas[k]
                b_src = frozen(states[k + 1], times[k + 1])
                b_gen = frozen(states[k], _gen_time("backward", times, k, convention))
                src = states[k + 1] - b_src * d_k
                # backward generation descends, so the generated member of the
                # pair is z_k and its resampling plan lives at index k
                if k in cache.plans:
                    src = cache.plans[k].transform @ src
                const[k] = states[k] - b_gen * d_k - src
        else:
            raise ValueError(f"unknown direction {direction!r}")
        self.const = const

    def loss_var(self, trainee: DriftNet, p: Var, idx_k, idx_i):
        Xb = self.gen[idx_k, idx_i]
        tb = self.t_gen[idx_k]
        db = self.deltas[idx_k][:, None]
        cb = self.const[idx_k, idx_i]
        r = trainee.forward_var(p, Xb, tb) * db + cb
        return (r * r).sum() * (1.0 / len(idx_k))

    def loss_value(self, trainee: DriftNet, idx_k, idx_i):
        Xb = self.gen[idx_k, idx_i]
        r = trainee(Xb, self.t_gen[idx_k]) * self.deltas[idx_k][:, None] + self.const[idx_k, idx_i]
        return float((r * r).sum() / len(idx_k))


def full_loss(direction, trainee, frozen, cache: TrajectoryCache, pairs, grid: TimeGrid,
              convention="printed") -> float:
    """Batch-mean loss over (particle, pair-index) entries, dispatching each
    entry to the observation or plain term by plan membership at the pair's
    generated index."""
    tables = _HalfBridgeTables(direction, cache, frozen, grid, convention)
    pairs = np.asarray(pairs)
    return tables.loss_value(trainee, pairs[:, 1], pairs[:, 0])


def full_loss_gradient(direction, trainee, frozen, cache, pairs, grid,
                       convention="printed"):
    """(loss, d loss / d trainee params) for a fixed batch."""
    tables = _HalfBridgeTables(direction, cache, frozen, grid, convention)
    pairs = np.asarray(pairs)
    idx_i, idx_k = pairs[:, 0], pairs[:, 1]
    value = tables.loss_value(trainee, idx_k, idx_i)
    grad = loss_gradient(trainee, lambda p: tables.loss_var(trainee, p, idx_k, idx_i))
    return value, grad


# -- cache generation and training -------------------------------------------


def generate_cache(direction, net, boundary_sampler, obs: ObservationSet,
                   cfg: IsbConfig, l: int, rng: np.random.Generator) -> TrajectoryCache:
    """Simulate one filtered pass; forward caches start from pi_0, backward
    caches from pi_T.  The hook draws nothing from the stream, so disabling
    filtering leaves an identical unfiltered trajectory."""
    plans: dict = {}
    ess_at: dict = {}
    kappa_l = cfg.kappa(l)

    hook = None
    if cfg.filtering_enabled and obs is not None:
        # installed even for empty observation sets: the hook consumes no
        # randomness, so runs with filtering disabled stay bitwise identical
        def hook(X, k):
            ens, plan, e = filter_hook(ParticleEnsemble.uniform(X, k), k, obs, kappa_l, cfg.ot)
            if plan is not None:
                plans[k] = plan
                ess_at[k] = e
            return ens.states

    run = simulate if direction == "forward" else simulate_backward
    traj = run(net, boundary_sampler, cfg.grid, cfg.g, rng, hook=hook)
    return TrajectoryCache(traj, plans, ess_at, direction, l, times=cfg.grid.times)


def _sample_pairs(rng, n_particles, n_pairs, batch_size):
    idx_i = rng.integers(0, n_particles, size=batch_size)
    idx_k = rng.integers(0, n_pairs, size=batch_size)
    return idx_i, idx_k


def train_half_bridge(direction, trainee: DriftNet, frozen, cache_source, cfg: IsbConfig,
                      l: int, rng: np.random.Generator):
    """Run inner_iters optimizer steps on minibatched mean-matching loss.

    `cache_source(rng)` generates a fresh cache with the frozen drift; it is
    called up front and again every cache_refresh steps.  Returns
    (trained net, stats dict with the first generated cache and last loss).
    """
    stats = {"first_cache": None, "final_loss": None}
    if cfg.inner_iters <= 0:
        stats["first_cache"] = cache_source(rng)
        return trainee, stats

    state = OptimizerState.create(trainee, learning_rate=cfg.lr)
    tables = None
    cache = None
    for it in range(cfg.inner_iters):
        if it % cfg.cache_refresh == 0:
            cache = cache_source(rng)
            if stats["first_cache"] is None:
                stats["first_cache"] = cache
            tables = _HalfBridgeTables(direction, cache, frozen, cfg.grid,
                                       cfg.loss_time_convention)
        if cfg.lr_schedule == "cosine":
            lr_t = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * it / cfg.inner_iters))
            state = replace(state, learning_rate=lr_t)
        idx_i, idx_k = _sample_pairs(rng, cache.states.shape[1],
                                     cache.n_steps - 1, cfg.batch_size)
        try:
            grad = loss_gradient(trainee, lambda p: tables.loss_var(trainee, p, idx_k, idx_i))
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"non-finite loss in {direction} half-bridge at iteration {it} "
                f"(l={l}, batch k={idx_k[:8].tolist()}...)"
            ) from exc
        trainee, state = optimizer_step(trainee, grad, state)
        if it == cfg.inner_iters - 1:
            stats["final_loss"] = tables.loss_value(trainee, idx_k, idx_i)
    return trainee, stats


def control_cost(f_net, reference_drift, cache: TrajectoryCache, g) -> float:
    """Monte-Carlo estimate of the control objective along cached forward
    trajectories: mean over particles of sum_k ||f - f_ref||^2 dt / (2 g^2)."""
    if cache.direction != "forward":
        raise ValueError("control cost is defined along forward caches")
    if cache.times is None:
        raise ValueError("cache has no grid times attached")
    states = cache.states
    K = states.shape[0]
    total = 0.0
    for k in range(K - 1):
        t_k = cache.times[k]
        g_k = g(t_k)
        if g_k == 0.0:
            raise ZeroDivisionError("diffusion vanishes; control cost undefined")
        diff = f_net(states[k], t_k) - reference_drift(states[k], t_k)
        d_k = cache.times[k + 1] - t_k
        total += float((diff * diff).sum(axis=1).mean()) * d_k / (2.0 * g_k**2)
    return total


def isb_run(cfg: IsbConfig, pi0_sampler, piT_sampler, obs: ObservationSet = None,
            reference_drift=None, checkpoint_dir=None, f_init=None, b_init=None):
    """Alternate the four bridge steps for n_outer iterations.

    Samplers receive (rng, n) and return (n, d) arrays.  Returns
    (f_net, b_net, diagnostics) where diagnostics maps the outer iteration l
    to ESS, terminal statistics of both directions, control cost and wall
    time.  Checkpoints are written per iteration when a directory is given.
    """
    d = np.asarray(pi0_sampler(np.random.default_rng(cfg.seed), 1)).shape[1]
    root = np.random.SeedSequence(cfg.seed)
    seeds = root.spawn(cfg.n_outer * 4 + 2)
    f_net = f_init if f_init is not None else cfg.make_net(d, seed=cfg.seed + 1)
    b_net = b_init if b_init is not None else cfg.make_net(d, seed=cfg.seed + 2)
    if reference_drift is None:
        reference_drift = lambda X, t: np.zeros_like(X)
    if obs is None:
        obs = ObservationSet.empty()

    def init0(rng):
        return np.asarray(pi0_sampler(rng, cfg.n_particles), dtype=np.float64)

    def initT(rng):
        return np.asarray(piT_sampler(rng, cfg.n_particles), dtype=np.float64)

    diagnostics = {}
    for l in range(1, cfg.n_outer + 1):
        t_start = time.perf_counter()
        rng_f = np.random.default_rng(seeds[4 * (l - 1)])
        rng_b = np.random.default_rng(seeds[4 * (l - 1) + 1])
        rng_d = np.random.default_rng(seeds[4 * (l - 1) + 2])

        f_frozen = f_net
        b_net, fwd_stats = train_half_bridge(
            "forward", b_net, f_frozen,
            lambda r: generate_cache("forward", f_frozen, init0, obs, cfg, l, r),
            cfg, l, rng_f)
        b_frozen = b_net
        f_net, bwd_stats = train_half_bridge(
            "backward", f_net, b_frozen,
            lambda r: generate_cache("backward", b_frozen, initT, obs, cfg, l, r),
            cfg, l, rng_b)

        fwd_cache = fwd_stats["first_cache"]
        # diagnostics use fresh unfiltered runs of the just-trained drifts
        diag_fwd = generate_cache("forward", f_net, init0,
                                  ObservationSet.empty(), cfg, l, rng_d)
        diag_bwd = generate_cache("backward", b_net, initT,
                                  ObservationSet.empty(), cfg, l, rng_d)
        ess_values = {int(k): float(v) for k, v in sorted(fwd_cache.ess.items())}
        diagnostics[l] = {
            "ess_per_obs_time": ess_values,
            "mean_ess": float(np.mean(list(ess_values.values()))) if ess_values else None,
            "terminal_mean_forward": diag_fwd.states[-1].mean(axis=0).tolist(),
            "terminal_std_forward": diag_fwd.states[-1].std(axis=0).tolist(),
            "terminal_mean_backward": diag_bwd.states[0].mean(axis=0).tolist(),
            "terminal_std_backward": diag_bwd.states[0].std(axis=0).tolist(),
            "control_cost": control_cost(f_net, reference_drift, diag_fwd, cfg.g),
            "final_loss_forward_phase": fwd_stats["final_loss"],
            "final_loss_backward_phase": bwd_stats["final_loss"],
            "wallclock_s": time.perf_counter() - t_start,
        }
        if checkpoint_dir is not None:
            save_checkpoint(f_net, f"{checkpoint_dir}/net_fwd_l{l}.json")
            save_checkpoint(b_net, f"{checkpoint_dir}/net_bwd_l{l}.json")
    return f_net, b_net, diagnostics
