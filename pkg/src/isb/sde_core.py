"""Time discretization, noise schedules and Euler-Maruyama simulation.

The forward process steps x_{k+1} = x_k + f(x_k, t_k) dt + g(t_k) sqrt(dt) xi.
The backward (reverse-time) process is integrated from the terminal slice down
to t = 0 with the drift entering with a negative increment,

    z_k = z_{k+1} - b(z_{k+1}, t_{k+1}) dt + g(t_k) sqrt(dt) xi,

which is the Euler discretization of dz = b dt + g dbeta-hat traversed with
decreasing t.  With this convention the drift that exactly retraces a
noise-free forward run is b = +f, and a trained reversal satisfies
b = f - g^2 grad-log-density.  The diffusion is evaluated at the left
endpoint of each interval in both directions, so forward and backward steps
over [t_k, t_{k+1}] inject identical noise variance.

One seeded generator drives a whole simulation: the initial sample first,
then one normal draw per step, in grid order.  Per-step hooks (filtering)
never consume randomness, so a run with hooks disabled is bitwise identical
outside the hook-modified slices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TimeGrid",
    "DiffusionSchedule",
    "ObsNoiseSchedule",
    "ParticleEnsemble",
    "euler_step",
    "simulate",
    "simulate_backward",
    "schedule_value",
    "write_trajectory_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times with times[0] = 0 and times[-1] = T."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("need at least two grid times")
        if t[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        """n_steps points spanning [0, horizon]."""
        return cls(np.linspace(0.0, horizon, n_steps))

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def __len__(self):
        return self.times.size

    def index_of(self, t: float) -> int:
        """Nearest grid index for an observation time; the match must be
        within half the local step and unique."""
        k = int(np.argmin(np.abs(self.times - t)))
        local = self.deltas[min(k, len(self) - 2)]
        gap = abs(self.times[k] - t)
        if gap > local / 2 + 1e-12:
            raise ValueError(f"time {t} does not snap to the grid (nearest {self.times[k]})")
        ties = np.flatnonzero(np.abs(np.abs(self.times - t) - gap) < 1e-15)
        if ties.size > 1:
            raise ValueError(f"time {t} is equidistant from two grid points")
        return k


@dataclass(frozen=True)
class DiffusionSchedule:
    """Scalar diffusion g(t); parameters may describe g or g^2.

    kind 'constant': value = a.  kind 'linear': interpolates a -> b over
    [0, horizon].  With squared=True the interpolation runs on g^2 and the
    schedule returns its square root.
    """

    kind: str = "constant"
    a: float = 1.0
    b: float = 1.0
    horizon: float = 1.0
    squared: bool = False

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ValueError(f"unknown diffusion schedule {self.kind!r}")
        if self.a <= 0 or (self.kind == "linear" and self.b <= 0):
            raise ValueError("diffusion must stay positive")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            v = self.a
        else:
            if not 0.0 <= t <= self.horizon + 1e-12:
                raise ValueError(f"t={t} outside [0, {self.horizon}]")
            v = self.a + (self.b - self.a) * (t / self.horizon)
        return math.sqrt(v) if self.squared else v


@dataclass(frozen=True)
class ObsNoiseSchedule:
    """Observation noise kappa(l) over outer iterations l = 1..L.

    kinds: 'constant' (a); 'linear' (a -> b over l = 1..L);
    'bilinear' (a -> b over the first half, back to a over the second,
    the annealing shape); 'exponential' (a * base**(l-1)).
    """

    kind: str = "constant"
    a: float = 1.0
    b: float = 1.0
    base: float = 1.25
    n_iters: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "bilinear", "exponential"):
            raise ValueError(f"unknown observation noise schedule {self.kind!r}")
        if min(self.a, self.b, self.base) <= 0:
            raise ValueError("kappa must stay positive")

    def __call__(self, l: int) -> float:
        if l < 1:
            raise ValueError("iteration index starts at 1")
        if self.kind == "constant":
            return self.a
        if self.kind == "exponential":
            return self.a * self.base ** (l - 1)
        span = max(self.n_iters - 1, 1)
        if self.kind == "linear":
            frac = min((l - 1) / span, 1.0)
            return self.a + (self.b - self.a) * frac
        # bilinear: down to b at mid, back up to a
        mid = (self.n_iters + 1) / 2.0
        if l <= mid:
            frac = (l - 1) / max(mid - 1, 1e-12)
            return self.a + (self.b - self.a) * min(frac, 1.0)
        frac = (l - mid) / max(self.n_iters - mid, 1e-12)
        return self.b + (self.a - self.b) * min(frac, 1.0)


def schedule_value(schedule, arg):
    """Evaluate a diffusion schedule at time t or an observation-noise
    schedule at iteration l."""
    return schedule(arg)


@dataclass
class ParticleEnsemble:
    """N x d states with log-weights at one grid index."""

    states: np.ndarray
    log_weights: np.ndarray
    time_index: int

    @classmethod
    def uniform(cls, states: np.ndarray, time_index: int) -> "ParticleEnsemble":
        n = states.shape[0]
        return cls(states, np.full(n, -math.log(n)), time_index)

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]

    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - self.log_weights.max())
        return w / w.sum()


def euler_step(X: np.ndarray, drift: np.ndarray, g_t: float, delta: float,
               rng: np.random.Generator) -> np.ndarray:
    """X + drift*delta + g*sqrt(delta)*Xi with standard normal Xi."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if g_t < 0:
        raise ValueError("diffusion must be non-negative")
    bad = ~np.isfinite(drift).all(axis=tuple(range(1, drift.ndim)))
    if bad.any():
        raise FloatingPointError(f"non-finite drift for particle {int(np.flatnonzero(bad)[0])}")
    out = X + drift * delta
    if g_t > 0.0:
        out = out + g_t * math.sqrt(delta) * rng.standard_normal(X.shape)
    return out


def _run(drift_fn, init, grid, g, rng, hook, forward: bool):
    times = grid.times
    deltas = grid.deltas
    K = len(grid)
    X = np.asarray(init, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("initial sample must be (N, d)")
    traj = np.empty((K, X.shape[0], X.shape[1]))
    if forward:
        traj[0] = X
        for k in range(K - 1):
            drift = drift_fn(traj[k], times[k])
            X = euler_step(traj[k], drift, g(times[k]), deltas[k], rng)
            if hook is not None:
                X = hook(X, k + 1)
            traj[k + 1] = X
    else:
        traj[K - 1] = X
        for k in range(K - 2, -1, -1):
            drift = drift_fn(traj[k + 1], times[k + 1])
            # reverse-time integration: drift enters negatively, g at the
            # interval's left endpoint to mirror the forward noise injection
            X = euler_step(traj[k + 1], -drift, g(times[k]), deltas[k], rng)
            if hook is not None:
                X = hook(X, k)
            traj[k] = X
    return traj


def simulate(net, init_sampler, grid: TimeGrid, g, rng: np.random.Generator, hook=None):
    """Forward trajectories; slice k of the result sits at grid time t_k.

    `net` is any callable (X, t) -> drift rows; `init_sampler(rng)` draws the
    (N, d) initial slice; `hook(X, k)`, when given, may replace the freshly
    generated slice (resampling) and is invoked for k = 1..K-1.
    """
    return _run(net, init_sampler(rng), grid, g, rng, hook, forward=True)


def simulate_backward(net, init_sampler, grid: TimeGrid, g, rng: np.random.Generator, hook=None):
    """Reverse-time trajectories, stored time-aligned with `simulate`.

    Slice K-1 is the terminal-law sample; slices are generated downward, the
    hook runs for k = K-2..0, and slice 0 is produced last.
    """
    return _run(net, init_sampler(rng), grid, g, rng, hook, forward=False)


def write_trajectory_csv(path: str, traj: np.ndarray, grid: TimeGrid) -> None:
    """Rows `time_index,t,particle,dim_0,...`; one row per (k, i)."""
    K, N, d = traj.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "t", "particle"] + [f"dim_{j}" for j in range(d)])
        for k in range(K):
            t = grid.times[k]
            for i in range(N):
                w.writerow([k, repr(float(t)), i] + [repr(float(v)) for v in traj[k, i]])
