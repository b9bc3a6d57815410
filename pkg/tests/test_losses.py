import numpy as np
import pytest

from isb.isb_train import (
    IsbConfig,
    TrajectoryCache,
    backward_loss_nobs,
    backward_loss_obs,
    full_loss,
    full_loss_gradient,
    generate_cache,
    loss_nobs,
    loss_obs,
)
from isb.nn_drift import DriftNet
from isb.ot_resample import TransportPlan
from isb.particle_filter import ObservationSet
from isb.sde_core import DiffusionSchedule, TimeGrid


class ConstNet:
    """Callable drift returning a constant vector; stands in for a DriftNet."""

    def __init__(self, value, d=1):
        self.value = np.full(d, float(value))

    def __call__(self, X, t):
        X = np.atleast_2d(X)
        return np.broadcast_to(self.value, X.shape)


zero1 = ConstNet(0.0)


def identity_plan(n):
    P = np.eye(n) / n
    return TransportPlan(P, np.eye(n), 0.01, 1, 0.0)


def mixing_plan():
    T = np.full((2, 2), 0.5)
    return TransportPlan(T / 2, T, 0.01, 1, 0.0)


class TestForwardLosses:
    def test_zero_nets_same_point_is_zero(self):
        v = loss_nobs(zero1, zero1, np.array([[1.3]]), np.array([[1.3]]), 0.1, 0.2, 0.1)
        assert v == 0.0

    def test_hand_value_displacement(self):
        # f = b = 0, x_k = 0, x_{k+1} = 2: residual is -2, loss 4
        v = loss_nobs(zero1, zero1, np.array([[0.0]]), np.array([[2.0]]), 0.1, 0.2, 0.1)
        assert v == pytest.approx(4.0)

    def test_constructed_zero_residual(self):
        # choose b so the bracket vanishes for one pair
        d, delta = 1, 0.05
        f = ConstNet(0.7)
        x_k = np.array([[0.4]])
        x_k1 = np.array([[0.9]])
        b_val = (x_k1 + f(x_k1, 0) * delta - x_k - f(x_k, 0) * delta)[0, 0] / delta
        v = loss_nobs(ConstNet(b_val), f, x_k, x_k1, 0.0, delta, delta)
        assert v < 1e-24

    def test_identity_plan_collapses_obs_to_nobs(self):
        rng = np.random.default_rng(0)
        X_k = rng.normal(size=(4, 2))
        x_k1 = rng.normal(size=(4, 2))
        f = ConstNet(0.3, d=2)
        b = ConstNet(-0.2, d=2)
        v_obs = loss_obs(b, f, X_k, x_k1, [0, 1, 2, 3], identity_plan(4), 0.3, 0.4, 0.1)
        v_nobs = loss_nobs(b, f, X_k, x_k1, 0.3, 0.4, 0.1)
        assert v_obs == pytest.approx(v_nobs, rel=1e-12)

    def test_hand_value_coupled_sum_zero(self):
        # T rows (0.5, 0.5), f=b=0, x_k={0,2}, x_{k+1}^1=1: residual 0
        X_k = np.array([[0.0], [2.0]])
        v = loss_obs(zero1, zero1, X_k, np.array([[1.0]]), [0], mixing_plan(), 0.1, 0.2, 0.1)
        assert v == pytest.approx(0.0, abs=1e-24)

    def test_hand_value_coupled_sum_offset(self):
        # same but x_{k+1}^1 = 3: residual -2, loss 4
        X_k = np.array([[0.0], [2.0]])
        v = loss_obs(zero1, zero1, X_k, np.array([[3.0]]), [0], mixing_plan(), 0.1, 0.2, 0.1)
        assert v == pytest.approx(4.0)

    def test_plan_size_mismatch(self):
        with pytest.raises(ValueError):
            loss_obs(zero1, zero1, np.zeros((3, 1)), np.zeros((1, 1)), [0],
                     mixing_plan(), 0.1, 0.2, 0.1)


class TestBackwardLosses:
    def test_identity_plan_collapse(self):
        rng = np.random.default_rng(1)
        Z_k1 = rng.normal(size=(4, 2))
        z_k = rng.normal(size=(4, 2))
        f = ConstNet(0.3, d=2)
        b = ConstNet(-0.2, d=2)
        v_obs = backward_loss_obs(f, b, Z_k1, z_k, [0, 1, 2, 3], identity_plan(4), 0.3, 0.4, 0.1)
        v_nobs = backward_loss_nobs(f, b, z_k, Z_k1, 0.3, 0.4, 0.1)
        assert v_obs == pytest.approx(v_nobs, rel=1e-12)

    def test_zero_displacement_zero_loss(self):
        v = backward_loss_nobs(zero1, zero1, np.array([[0.7]]), np.array([[0.7]]), 0.1, 0.2, 0.1)
        assert v == 0.0

    def test_losses_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            v = backward_loss_nobs(ConstNet(rng.normal()), ConstNet(rng.normal()),
                                   rng.normal(size=(3, 1)), rng.normal(size=(3, 1)),
                                   0.2, 0.3, 0.1)
            assert v >= 0.0


def small_cfg(**kw):
    defaults = dict(
        n_particles=16,
        grid=TimeGrid.uniform(1.0, 6),
        g=DiffusionSchedule("constant", 0.5),
        inner_iters=0,
        seed=3,
    )
    defaults.update(kw)
    return IsbConfig(**defaults)


def gauss_sampler(d):
    return lambda rng: rng.normal(size=(16, d))


class TestFullLoss:
    def _cache(self, cfg, with_obs):
        obs = ObservationSet.empty()
        if with_obs:
            obs = ObservationSet.from_records([(0.4, [0.0]), (0.4, [1.0])], cfg.grid)
        net = ConstNet(0.1)
        return generate_cache("forward", net, gauss_sampler(1), obs, cfg, 1,
                              np.random.default_rng(0)), net

    def test_no_observation_cache_uses_only_nobs_terms(self):
        cfg = small_cfg()
        cache, f = self._cache(cfg, with_obs=False)
        b = ConstNet(-0.3)
        pairs = [(i, k) for i in range(4) for k in range(cfg.grid.times.size - 1)]
        total = full_loss("forward", b, f, cache, pairs, cfg.grid)
        by_hand = np.mean([
            loss_nobs(b, f, cache.states[k][[i]], cache.states[k + 1][[i]],
                      cfg.grid.times[k], cfg.grid.times[k + 1], cfg.grid.deltas[k])
            for i, k in pairs
        ])
        assert total == pytest.approx(by_hand, rel=1e-12)

    def test_mixed_cache_dispatches_obs_terms(self):
        # the coupled term belongs to the pair whose generated slice was
        # resampled: plan at k+1 for the forward pair (k, k+1)
        cfg = small_cfg()
        cache, f = self._cache(cfg, with_obs=True)
        assert list(cache.plans) == [2]
        b = ConstNet(-0.3)
        pairs = [(i, k) for i in range(3) for k in range(5)]
        total = full_loss("forward", b, f, cache, pairs, cfg.grid)
        by_hand = []
        for i, k in pairs:
            if (k + 1) in cache.plans:
                by_hand.append(loss_obs(b, f, cache.states[k], cache.states[k + 1][[i]],
                                        [i], cache.plans[k + 1], cfg.grid.times[k],
                                        cfg.grid.times[k + 1], cfg.grid.deltas[k]))
            else:
                by_hand.append(loss_nobs(b, f, cache.states[k][[i]], cache.states[k + 1][[i]],
                                         cfg.grid.times[k], cfg.grid.times[k + 1],
                                         cfg.grid.deltas[k]))
        assert total == pytest.approx(np.mean(by_hand), rel=1e-12)

    def test_gradient_matches_finite_differences_on_full_loss(self):
        # random cache slice through the complete dispatch path
        cfg = small_cfg()
        obs = ObservationSet.from_records([(0.4, [0.5])], cfg.grid)
        f = ConstNet(0.2)
        cache = generate_cache("forward", f, gauss_sampler(1), obs, cfg, 1,
                               np.random.default_rng(4))
        rng = np.random.default_rng(5)
        pairs = np.stack([rng.integers(0, 16, 40), rng.integers(0, 5, 40)], axis=1)
        for widths in [(4,), (8, 8), (6, 5, 4)]:
            net = DriftNet.create(1, hidden=widths, time_features=4, seed=7)
            value, grad = full_loss_gradient("forward", net, f, cache, pairs, cfg.grid)
            h = 1e-5
            sel = rng.choice(net.params.size, min(30, net.params.size), replace=False)
            for j in sel:
                e = np.zeros_like(net.params)
                e[j] = h
                up = full_loss("forward", net.with_params(net.params + e), f, cache, pairs, cfg.grid)
                dn = full_loss("forward", net.with_params(net.params - e), f, cache, pairs, cfg.grid)
                fd = (up - dn) / (2 * h)
                if abs(fd) > 1e-6:
                    assert abs(fd - grad[j]) / abs(fd) < 1e-4

    def test_backward_cache_dispatch_key_is_generated_index(self):
        # backward generation descends, so the pair (2, 3) has generated
        # member z_2; an observation at index 2 couples exactly that pair
        cfg = small_cfg()
        obs = ObservationSet.from_records([(0.4, [0.0])], cfg.grid)
        b = ConstNet(0.1)
        cache = generate_cache("backward", b, gauss_sampler(1), obs, cfg, 1,
                               np.random.default_rng(6))
        assert cache.direction == "backward"
        assert list(cache.plans) == [2]
        f = ConstNet(-0.2)
        pairs = [(i, 2) for i in range(4)]
        total = full_loss("backward", f, b, cache, pairs, cfg.grid)
        by_hand = np.mean([
            backward_loss_obs(f, b, cache.states[3], cache.states[2][[i]], [i],
                              cache.plans[2], cfg.grid.times[2], cfg.grid.times[3],
                              cfg.grid.deltas[2])
            for i in range(4)
        ])
        assert total == pytest.approx(by_hand, rel=1e-12)


class TestGenerateCache:
    def test_no_observations_matches_plain_simulation(self):
        cfg = small_cfg()
        net = ConstNet(0.1)
        c1 = generate_cache("forward", net, gauss_sampler(1), ObservationSet.empty(),
                            cfg, 1, np.random.default_rng(9))
        from isb.sde_core import simulate

        traj = simulate(net, gauss_sampler(1), cfg.grid, cfg.g, np.random.default_rng(9))
        assert np.array_equal(c1.states, traj)
        assert c1.plans == {}

    def test_determinism(self):
        cfg = small_cfg()
        obs = ObservationSet.from_records([(0.4, [0.3])], cfg.grid)
        net = ConstNet(0.1)
        a = generate_cache("forward", net, gauss_sampler(1), obs, cfg, 1,
                           np.random.default_rng(10))
        b = generate_cache("forward", net, gauss_sampler(1), obs, cfg, 1,
                           np.random.default_rng(10))
        assert np.array_equal(a.states, b.states)
        assert a.ess.keys() == b.ess.keys()

    def test_filtering_pulls_mean_toward_observation(self):
        cfg = small_cfg(n_particles=200, ot=__import__("isb.ot_resample", fromlist=["SinkhornConfig"]).SinkhornConfig(epsilon=0.1, marginal_tol=1e-6))
        target = 2.5
        obs = ObservationSet.from_records([(0.4, [target])], cfg.grid, sigma_base=0.3)
        net = ConstNet(0.0)
        sampler = lambda rng: rng.normal(size=(200, 1))
        filtered = generate_cache("forward", net, sampler, obs, cfg, 1,
                                  np.random.default_rng(11))
        plain = generate_cache("forward", net, sampler, ObservationSet.empty(), cfg, 1,
                               np.random.default_rng(11))
        k = cfg.grid.index_of(0.4)
        d_filtered = abs(filtered.states[k].mean() - target)
        d_plain = abs(plain.states[k].mean() - target)
        assert d_filtered < d_plain
