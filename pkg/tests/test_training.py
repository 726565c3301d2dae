import numpy as np
import pytest

from bespoke_ode.bespoke_loss import capture_anchors
from bespoke_ode.bespoke_scheme import identity_params, materialize, random_scheme_params
from bespoke_ode.errors import NumericalAbortError, ProbeFailureError
from bespoke_ode.training import (
    AdamState,
    TrainConfig,
    adam_update,
    central_fd_gradient,
    gradient,
    prepare_gt_batch,
    train,
)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(grad_engine="autograd")
        with pytest.raises(ValueError):
            TrainConfig(iterations=-1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestAdam:
    def test_first_step_oracle(self):
        theta = np.array([1.0, 2.0])
        grad = np.array([0.5, -1.0])
        lr = 0.1
        new, state = adam_update(AdamState.init(2), theta, grad, lr)
        # bias correction makes the first step lr * g / (|g| + eps)
        want = theta - lr * grad / (np.abs(grad) + 1e-8)
        assert np.allclose(new, want, rtol=1e-12)
        assert state.step == 1

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(4)
        lr = 0.01
        state = AdamState.init(4)
        m = np.zeros(4)
        v = np.zeros(4)
        got = theta.copy()
        for step in range(1, 6):
            grad = rng.standard_normal(4)
            got, state = adam_update(state, got, grad, lr)
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            mh = m / (1.0 - 0.9**step)
            vh = v / (1.0 - 0.999**step)
            theta = theta - lr * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(got, theta, rtol=1e-12)


class TestCentralFd:
    def test_exact_on_quadratic(self):
        # symmetric differences have no truncation error on quadratics
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        f = lambda v: float(v @ a @ v)
        theta = np.array([0.3, -1.7])
        grad = central_fd_gradient(f, theta)
        assert np.allclose(grad, 2.0 * a @ theta, rtol=1e-8)

    def test_step_scales_with_coordinate(self):
        seen = []
        f = lambda v: seen.append(v.copy()) or 0.0
        theta = np.array([0.0, 10.0])
        central_fd_gradient(f, theta, fd_epsilon=1e-5)
        assert np.isclose(seen[0][0] - theta[0], 1e-5 * 1.0)
        assert np.isclose(seen[2][1] - theta[1], 1e-5 * 11.0)

    def test_probe_failures(self):
        from bespoke_ode.errors import DegenerateGridError

        def bad(v):
            raise DegenerateGridError("collapsed")

        with pytest.raises(ProbeFailureError) as exc:
            central_fd_gradient(bad, np.zeros(2))
        assert exc.value.coordinate == 0
        with pytest.raises(ProbeFailureError):
            central_fd_gradient(lambda v: np.inf, np.zeros(2))


class TestGradientEngines:
    def test_engines_agree(self, gmm_field, gmm_paths):
        params = random_scheme_params(np.random.default_rng(1), "rk2", 3, spread=0.3)
        anchors = capture_anchors(gmm_paths[:2], gmm_field, materialize(params).step_times())
        loss_fs, grad_fs = gradient(params, gmm_field, anchors, engine="forward-sens")
        loss_fd, grad_fd = gradient(
            params, gmm_field, anchors, engine="central-fd", fd_epsilon=1e-6
        )
        assert np.isclose(loss_fs, loss_fd, rtol=1e-12)
        scale = np.maximum(np.abs(grad_fs), 1e-6)
        assert np.max(np.abs(grad_fs - grad_fd) / scale) <= 1e-4

    def test_unknown_engine(self, gmm_field, gmm_paths):
        params = identity_params("rk1", 2)
        anchors = capture_anchors(gmm_paths[:1], gmm_field, materialize(params).step_times())
        with pytest.raises(ValueError):
            gradient(params, gmm_field, anchors, engine="simultaneous-perturbation")


class TestGtBatch:
    def test_seeded_determinism(self, gmm_field):
        s = np.random.SeedSequence(entropy=5, spawn_key=(1, 0))
        a = prepare_gt_batch(gmm_field, 4, s, rtol=1e-7)
        b = prepare_gt_batch(gmm_field, 4, np.random.SeedSequence(entropy=5, spawn_key=(1, 0)), rtol=1e-7)
        c = prepare_gt_batch(gmm_field, 4, np.random.SeedSequence(entropy=6, spawn_key=(1, 0)), rtol=1e-7)
        assert np.array_equal(a[0].states, b[0].states)
        assert np.array_equal(a[2].times, b[2].times)
        assert not np.array_equal(a[0].states[0], c[0].states[0])


def quick_cfg(**kw):
    base = dict(
        n=3,
        base_kind="rk2",
        iterations=20,
        batch_size=8,
        validation_every=10,
        validation_size=16,
        gt_rtol=1e-7,
        gt_atol=1e-7,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_zero_iterations_returns_identity(self, gmm_field):
        params, history = train(quick_cfg(iterations=0), gmm_field)
        assert np.array_equal(params.to_vector(), identity_params("rk2", 3).to_vector())
        assert history.validations == [(0, history.init_val_rmse)]
        assert history.best_val_rmse == history.init_val_rmse

    def test_smoke_improves_validation(self, gmm_field):
        params, history = train(quick_cfg(iterations=60, learning_rate=5e-3), gmm_field)
        assert len(history.train_loss) == 60
        assert history.best_val_rmse <= history.init_val_rmse
        assert history.best_iteration > 0
        assert not np.array_equal(params.to_vector(), identity_params("rk2", 3).to_vector())
        assert history.wall_seconds > 0.0
        doc = history.to_json_dict()
        assert doc["best_iteration"] == history.best_iteration

    def test_deterministic_across_runs(self, gmm_field):
        cfg = quick_cfg(iterations=10, n=2, base_kind="rk1", batch_size=4, validation_size=8)
        p1, h1 = train(cfg, gmm_field)
        p2, h2 = train(cfg, gmm_field)
        assert np.array_equal(p1.to_vector(), p2.to_vector())
        assert h1.validations == h2.validations

    def test_gt_provider_hook_and_batch_schedule(self, gmm_field):
        calls = []

        def provider(batch_size, seed):
            calls.append(batch_size)
            return prepare_gt_batch(gmm_field, batch_size, seed, rtol=1e-7)

        train(quick_cfg(iterations=3), gmm_field, gt_provider=provider)
        # one validation batch plus one reference batch per iteration
        assert calls == [16, 8, 8, 8]

        calls.clear()
        train(quick_cfg(iterations=3, fresh_batch_every=0), gmm_field, gt_provider=provider)
        assert calls == [16, 8]

    def test_progress_callback(self, gmm_field):
        seen = []
        train(quick_cfg(iterations=5), gmm_field, progress=lambda it, loss: seen.append(it))
        assert seen == [1, 2, 3, 4, 5]

    def test_divergent_rate_aborts(self, gmm_field):
        # a huge learning rate collapses the proposed time grid immediately,
        # and repeated rejection of the same proposal must abort
        with pytest.raises(NumericalAbortError):
            train(quick_cfg(iterations=10, learning_rate=1e9), gmm_field)
