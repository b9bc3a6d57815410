"""Observation bookkeeping and bootstrap weighting for the filtering steps.

Weights follow the bootstrap filter: the proposal is the model transition, so
a particle's unnormalized log-weight is the Gaussian observation
log-likelihood restricted to its H nearest observations at that time,

    log w_i = -1/(2 sigma^2) * sum_{y in H-NN(x_i)} ||x_i - y||^2.

The alternative kernel_average mode replaces the sum by the log of the mean
Gaussian kernel over the H nearest observations, which for dense observation
sets behaves like a density estimate.  Its constant normalizer is (2*pi)^(d/2)
(no sigma factor); any constant cancels under weight normalization, so the
filtering behaviour is identical either way.

Nearest neighbours are exact brute force with ties broken by lower
observation index.  Resampling at observation times is the deterministic
ensemble transform from ot_resample; between observations particles pass
through untouched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .ot_resample import SinkhornConfig, resample
from .sde_core import ParticleEnsemble, TimeGrid

__all__ = [
    "ObservationSet",
    "load_observations_csv",
    "write_observations_csv",
    "log_weights_bootstrap",
    "log_weights_kernel",
    "normalize",
    "ess",
    "filter_hook",
    "kappa_for_uniformity",
]


@dataclass
class ObservationSet:
    """Sparse (time, value) observations indexed by grid time index."""

    records: list  # [(t_j, y_j ndarray)]
    index: dict = field(default_factory=dict)  # time_index -> (m, d) array
    sigma_base: float = 1.0
    H: int = 1
    weighting_mode: str = "bootstrap_sum"

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be at least 1")
        if self.weighting_mode not in ("bootstrap_sum", "kernel_average"):
            raise ValueError(f"unknown weighting mode {self.weighting_mode!r}")

    @classmethod
    def empty(cls, **kw) -> "ObservationSet":
        return cls(records=[], index={}, **kw)

    @classmethod
    def from_records(cls, records, grid: TimeGrid, sigma_base=1.0, H=1,
                     weighting_mode="bootstrap_sum") -> "ObservationSet":
        """Snap each observation time to its grid index; repeated times stack."""
        records = [(float(t), np.asarray(y, dtype=np.float64)) for t, y in records]
        groups: dict = {}
        for t, y in records:
            k = grid.index_of(t)
            groups.setdefault(k, []).append(y)
        index = {k: np.stack(v) for k, v in sorted(groups.items())}
        return cls(records, index, sigma_base, H, weighting_mode)

    @property
    def n_observations(self) -> int:
        return len(self.records)

    def times_observed(self):
        return sorted(self.index)


def load_observations_csv(path: str, grid: TimeGrid, **kw) -> ObservationSet:
    """Read rows `t,dim_0,...`; rows need not be sorted."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "t":
            raise ValueError(f"{path}: expected header starting with 't'")
        for row in reader:
            if not row:
                continue
            records.append((float(row[0]), np.array([float(v) for v in row[1:]])))
    records.sort(key=lambda r: r[0])
    return ObservationSet.from_records(records, grid, **kw)


def write_observations_csv(path: str, records) -> None:
    records = [(float(t), np.atleast_1d(np.asarray(y, dtype=np.float64))) for t, y in records]
    d = records[0][1].shape[0] if records else 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"dim_{j}" for j in range(d)])
        for t, y in records:
            w.writerow([repr(t)] + [repr(float(v)) for v in y])


def _nearest_sq_dists(X: np.ndarray, obs: np.ndarray, H: int) -> np.ndarray:
    """(N, H) squared distances to each particle's H nearest observations."""
    X = np.atleast_2d(X)
    obs = np.atleast_2d(obs)
    H = min(H, obs.shape[0])
    d2 = ((X[:, None, :] - obs[None, :, :]) ** 2).sum(axis=-1)
    # stable sort keeps the lower observation index on ties
    order = np.argsort(d2, axis=1, kind="stable")[:, :H]
    return np.take_along_axis(d2, order, axis=1)


def log_weights_bootstrap(X, obs_at_k, sigma: float, H: int) -> np.ndarray:
    """Summed squared distances to the H nearest observations, scaled."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    obs = np.atleast_2d(np.asarray(obs_at_k, dtype=np.float64))
    if obs.shape[0] == 0:
        raise ValueError("no observations at this time index")
    d2 = _nearest_sq_dists(np.asarray(X, dtype=np.float64), obs, H)
    return -0.5 / sigma**2 * d2.sum(axis=1)


def log_weights_kernel(X, obs_at_k, sigma: float, H: int) -> np.ndarray:
    """Log of the average Gaussian kernel over the H nearest observations."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    obs = np.atleast_2d(np.asarray(obs_at_k, dtype=np.float64))
    if obs.shape[0] == 0:
        raise ValueError("no observations at this time index")
    d = obs.shape[1]
    d2 = _nearest_sq_dists(np.asarray(X, dtype=np.float64), obs, H)
    s = -0.5 / sigma**2 * d2
    mx = s.max(axis=1)
    lse = mx + np.log(np.exp(s - mx[:, None]).sum(axis=1))
    return lse - math.log(d2.shape[1]) - 0.5 * d * math.log(2.0 * math.pi)


def normalize(log_w: np.ndarray) -> np.ndarray:
    """Simplex weights from log-weights; shift invariant."""
    log_w = np.asarray(log_w, dtype=np.float64)
    mx = np.max(log_w)
    if not np.isfinite(mx):
        raise FloatingPointError("all log-weights are -inf; filter degenerate")
    w = np.exp(log_w - mx)
    return w / w.sum()


def ess(w: np.ndarray) -> float:
    """Effective sample size 1 / sum(w^2), between 1 and N."""
    w = np.asarray(w, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def filter_hook(ensemble: ParticleEnsemble, k: int, obs_set: ObservationSet,
                kappa_l: float, ot_cfg: SinkhornConfig):
    """One filtering step at grid index k.

    Without observations at k the ensemble passes through with no plan.
    Otherwise: weight, normalize, record ESS, differentiably resample.
    """
    if kappa_l <= 0:
        raise ValueError("kappa must be positive")
    obs = obs_set.index.get(k)
    if obs is None:
        return ensemble, None, None
    weigher = (log_weights_bootstrap if obs_set.weighting_mode == "bootstrap_sum"
               else log_weights_kernel)
    log_w = weigher(ensemble.states, obs, kappa_l, obs_set.H)
    try:
        w = normalize(log_w)
    except FloatingPointError as exc:
        raise FloatingPointError(f"degenerate weights at time_index {k}: {exc}") from exc
    ess_value = ess(w)
    states, plan = resample(ensemble.states, w, ot_cfg)
    return ParticleEnsemble.uniform(states, k), plan, ess_value


def kappa_for_uniformity(delta: float, n_obs: int, diameter: float) -> float:
    """Noise level guaranteeing max|w_hat - 1/N| <= delta for particles and
    observations inside a ball of the given diameter."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    R = -math.log(1.0 - delta)
    return math.sqrt(0.5 * n_obs * diameter**2 / R)
