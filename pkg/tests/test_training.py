"""Sampling, optimisers and the training driver."""

import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drills import HyperParams, Prnn, RevNet, TrainConfig, build_dataset, lhs_sample, train
from drills.bench.functions import TestFunction
from drills.losses import loss_total
from drills.training import AdamState, LossHistory, adam_step, lbfgs_minimize, uniform_sample


def strata_counts(X, lo, hi):
    N = X.shape[0]
    idx = np.floor((X - lo) / (hi - lo) * N).astype(int)
    idx = np.minimum(idx, N - 1)
    return np.stack([np.bincount(idx[:, j], minlength=N) for j in range(X.shape[1])], axis=1)


class TestLhs:
    def test_four_points_one_per_quarter(self):
        x = np.sort(lhs_sample(4, 1, 0.0, 1.0, seed=3)[:, 0])
        for k, v in enumerate(x):
            assert k / 4 <= v <= (k + 1) / 4

    @pytest.mark.parametrize("N,d", [(4, 3), (100, 10)])
    def test_stratification(self, N, d):
        lo, hi = np.full(d, -1.0), np.full(d, 1.0)
        X = lhs_sample(N, d, lo, hi, seed=7)
        assert X.shape == (N, d)
        np.testing.assert_array_equal(strata_counts(X, lo, hi), np.ones((N, d), dtype=int))

    def test_seed_reproduces_bitwise(self):
        a = lhs_sample(100, 5, 0.0, 1.0, seed=11)
        b = lhs_sample(100, 5, 0.0, 1.0, seed=11)
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != lhs_sample(100, 5, 0.0, 1.0, seed=12).tobytes()

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            lhs_sample(5, 2, [0.0, 1.0], [1.0, 1.0], seed=0)
        with pytest.raises(ValueError):
            lhs_sample(0, 2, 0.0, 1.0, seed=0)

    @settings(max_examples=30, deadline=None)
    @given(N=st.integers(1, 60), d=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
    def test_stratification_property(self, N, d, seed):
        X = lhs_sample(N, d, 0.0, 1.0, seed)
        assert np.all((X >= 0) & (X <= 1))
        np.testing.assert_array_equal(strata_counts(X, 0.0, 1.0), np.ones((N, d), dtype=int))


class TestBuildDataset:
    def test_cardinality_and_domain(self):
        fn = TestFunction("f4", 6, "B")
        data = build_dataset(fn, 37, seed=0)
        assert data.inputs.shape == (37, 6) and data.values.shape == (37,) and data.gradients.shape == (37, 6)
        assert np.all(data.inputs >= -1) and np.all(data.inputs <= 1)

    def test_gradients_match_finite_differences(self):
        fn = TestFunction("f6", 4, "B")
        data = build_dataset(fn, 20, seed=1)
        h = 1e-6
        for x, g in zip(data.inputs, data.gradients):
            fd = np.array([(fn.value(x + h * e) - fn.value(x - h * e)) / (2 * h) for e in np.eye(4)])
            np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_uniform_sample_in_box(self):
        X = uniform_sample(500, np.zeros(3), np.ones(3), seed=0)
        assert X.shape == (500, 3) and X.min() >= 0 and X.max() < 1


class TestAdam:
    def test_zero_gradient_leaves_theta(self):
        theta = np.array([1.0, -2.0, 3.0])
        new, _ = adam_step(theta, np.zeros(3), AdamState.zeros(3), 1e-3)
        np.testing.assert_array_equal(new, theta)

    def test_first_step_moves_by_lr_sign(self):
        g = np.array([0.5, -3.0, 1e-3])
        new, state = adam_step(np.zeros(3), g, AdamState.zeros(3), 1e-3)
        # m_hat = g, v_hat = g^2 at t = 1
        np.testing.assert_allclose(new, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-15)
        np.testing.assert_allclose(new, -1e-3 * np.sign(g), rtol=1e-4)
        assert state.t == 1

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        theta, g = rng.normal(size=5), rng.normal(size=5)
        state = AdamState(rng.normal(size=5), rng.uniform(size=5), 3)
        a, sa = adam_step(theta, g, state, 1e-2)
        b, sb = adam_step(theta, g, state, 1e-2)
        assert a.tobytes() == b.tobytes() and sa.m.tobytes() == sb.m.tobytes()

    def test_learning_rate_schedule(self):
        cfg = TrainConfig()
        assert cfg.learning_rate(12000) == pytest.approx(4.9e-4, rel=1e-14)
        assert cfg.learning_rate(0) == cfg.learning_rate(4999) == 1e-3
        assert cfg.learning_rate(5000) == pytest.approx(7e-4, rel=1e-14)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(stop_threshold=0.0)
        with pytest.raises(ValueError):
            TrainConfig(adam_decay=1.5)


class TestLbfgs:
    @pytest.mark.parametrize("n,seed", [(3, 0), (5, 1), (8, 2)])
    def test_quadratic_converges_fast(self, n, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(n + 2, n))
        b = rng.normal(size=n + 2)

        def fg(x):
            r = A @ x - b
            return r @ r, 2 * A.T @ r

        # finite termination needs near-exact line searches; the loose
        # training default (c2 = 0.9) is checked separately below
        res = lbfgs_minimize(fg, np.zeros(n), max_steps=100, gtol=1e-8, c2=0.01)
        assert res.n_iter <= n + 5
        assert np.linalg.norm(res.grad) < 1e-8
        np.testing.assert_allclose(res.theta, np.linalg.solve(A.T @ A, A.T @ b), atol=1e-8)

    def test_quadratic_with_default_curvature_condition(self):
        rng = np.random.default_rng(4)
        A, b = rng.normal(size=(10, 8)), rng.normal(size=10)

        def fg(x):
            r = A @ x - b
            return r @ r, 2 * A.T @ r

        res = lbfgs_minimize(fg, np.zeros(8), max_steps=200, gtol=1e-8)
        # near the optimum the decrease drops below round-off and the line
        # search may end the run; the iterate is still the minimiser
        assert np.linalg.norm(res.grad) < 1e-6
        np.testing.assert_allclose(res.theta, np.linalg.solve(A.T @ A, A.T @ b), atol=1e-7)
        assert np.all(np.diff(res.history) <= 0)

    def test_optimal_start_returns_start(self):
        def fg(x):
            return float(x @ x), 2 * x

        res = lbfgs_minimize(fg, np.zeros(4))
        assert res.n_iter == 0 and res.status == "gtol"
        np.testing.assert_array_equal(res.theta, np.zeros(4))

    def test_monotone_on_rosenbrock(self):
        def fg(x):
            a, b = x
            f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
            return f, np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])

        res = lbfgs_minimize(fg, np.array([-1.2, 1.0]), max_steps=200, gtol=1e-10)
        assert np.all(np.diff(res.history) <= 0)
        np.testing.assert_allclose(res.theta, [1.0, 1.0], atol=1e-6)

    def test_stop_threshold(self):
        res = lbfgs_minimize(lambda x: (float(x @ x), 2 * x), np.ones(3), stop_threshold=10.0)
        assert res.status == "threshold" and res.n_iter == 0


class TestLossHistory:
    def test_steps_must_increase(self):
        h = LossHistory()
        parts = {"L1": 0.0, "L2": 0.0, "L3": 0.0}
        h.append(0, "Adam", 1.0, parts)
        with pytest.raises(ValueError):
            h.append(0, "Adam", 1.0, parts)

    def test_csv_schema(self):
        h = LossHistory()
        h.append(0, "Adam", 0.1, {"L1": 0.05, "L2": 0.03, "L3": 0.2})
        rows = list(csv.reader(io.StringIO(h.to_csv())))
        assert rows[0] == ["step", "phase", "total", "L1", "L2", "L3"]
        assert rows[1] == ["0", "Adam", "0.1", "0.05", "0.03", "0.2"]


def small_problem(seed=0, N=60):
    fn = TestFunction("f1", 2, "A")
    return build_dataset(fn, N, seed), Prnn.create(2, np.random.default_rng(seed), [2, 6, 2])


class TestTrain:
    def test_huge_threshold_stops_at_first_evaluation(self):
        data, t = small_problem()
        model, hist = train(t, data, HyperParams(), TrainConfig(stop_threshold=1e300))
        assert model.meta["steps"] == 0 and model.meta["reached_threshold"]
        assert len(hist) == 1
        np.testing.assert_array_equal(model.transform.params(), t.params())

    def test_history_totals_recombine(self):
        data, t = small_problem()
        hp = HyperParams(lambda1=0.5, lambda2=2.0)
        _, hist = train(t, data, hp, TrainConfig(adam_max_steps=30, lbfgs_max_steps=10))
        steps = [r.step for r in hist]
        assert steps == sorted(set(steps))
        assert {r.phase for r in hist} == {"Adam", "LBFGS"}
        for r in hist:
            assert r.total == r.L1 + 0.5 * r.L2 + 2.0 * r.L3

    def test_loss_decreases(self):
        data, t = small_problem()
        hp = HyperParams()
        start = loss_total(t, data, hp)[0]
        model, hist = train(t, data, hp, TrainConfig(adam_max_steps=200, lbfgs_max_steps=20))
        assert model.meta["final_loss"] <= start
        assert loss_total(model.transform, data, hp)[0] == pytest.approx(model.meta["final_loss"], rel=1e-12)

    def test_deterministic_history(self):
        data, t = small_problem()
        cfg = TrainConfig(adam_max_steps=40, lbfgs_max_steps=10, seed=3)
        _, h1 = train(t, data, HyperParams(), cfg)
        _, h2 = train(t, data, HyperParams(), cfg)
        assert h1.to_csv() == h2.to_csv()

    def test_minibatch_option(self):
        data, t = small_problem(N=100)
        model, _ = train(t, data, HyperParams(), TrainConfig(adam_max_steps=20, lbfgs_max_steps=0, batch_size=25))
        assert model.meta["steps"] == 20

    def test_revnet_trains(self):
        data, _ = small_problem()
        net = RevNet.create(2, np.random.default_rng(0), num_blocks=3)
        model, hist = train(net, data, HyperParams(lambda2=0.0), TrainConfig(adam_max_steps=20, lbfgs_max_steps=5))
        assert all(r.L1 == 0.0 for r in hist)
        assert model.meta["final_loss"] <= hist.records[0].total

    def test_history_every(self):
        fn = TestFunction("f4", 3, "A")
        data = build_dataset(fn, 20, 0)
        t = Prnn.create(3, np.random.default_rng(0), [3, 4, 3])
        _, hist = train(t, data, HyperParams(), TrainConfig(adam_max_steps=35, lbfgs_max_steps=0))
        assert [r.step for r in hist][:4] == [0, 10, 20, 30]

    @pytest.mark.slow
    def test_f1_default_settings_stop_within_20000_adam_steps(self):
        fn = TestFunction("f1", 2, "A")
        data = build_dataset(fn, 500, seed=0)
        t = Prnn.create(2, np.random.default_rng(0))
        model, hist = train(t, data, HyperParams(), TrainConfig(adam_max_steps=20000, lbfgs_max_steps=0))
        assert model.meta["reached_threshold"] and model.meta["phase"] == "Adam"
        assert model.meta["steps"] < 20000
        # reversibility residual is at stopping scale
        assert hist.records[-1].L1 < 5e-5 * 10
