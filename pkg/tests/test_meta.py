import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_metarl.adapt import AdaptConfig, LambdaTooSmall
from bilevel_metarl.analysis import optimal_softmax_policy
from bilevel_metarl.mdp import TabularMdp
from bilevel_metarl.meta import (
    FIXED, FIXED_CLIP, MAML, THEOREM, MetaTrainConfig, averaged_gradient, meta_train,
    meta_train_batched, step_size_arms, step_size_crossover, task_outer_gradient,
    theorem_constants, theorem_step_size)
from bilevel_metarl.policy import SoftmaxPolicy
from bilevel_metarl.tasks import TaskDistribution, preset_distribution


def bandit(rewards, gamma=0.8):
    A = len(rewards)
    return TabularMdp(np.ones((1, A, 1)), np.array(rewards, float).reshape(1, A, 1), gamma,
                      np.ones(1))


def reference_constants(metric, r, g, a, lam):
    """Rational re-evaluation of the metric-1/2 constants and step-size arms."""
    r, g, a, lam = (Fraction(x) for x in (r, g, a, lam))
    q = 1 - g
    if metric == 1:
        B = 16 * r / (lam * q ** 3) + Fraction(24) / q + Fraction(12) / lam
        C, G = Fraction(6) / q, 4 * a / q ** 2
    else:
        B = 16 * r / (lam * q ** 3) + Fraction(18) / q ** 2
        C, G = Fraction(4) / q, 2 * a / q ** 2
    K = 2 * (B + 2 * C * C) * r * r / q ** 4
    M = (B + 2 * C * C) * G * r / q ** 4
    smooth = 1 / (r * B / q ** 2 + 2 * g * r * C * C / q ** 3)
    return B, C, G, K, M, smooth


class TestStepSize:
    @pytest.mark.parametrize("metric", [1, 2])
    def test_constants_match_rational_reference(self, metric):
        c = theorem_constants(metric, 1.0, 0.8, 1.0, 4.0)
        ref = reference_constants(metric, 1, Fraction(4, 5), 1, 4)
        for got, want in zip((c.B, c.C, c.G, c.K, c.M), ref[:5]):
            assert abs(got - float(want)) <= 1e-12 * abs(float(want))
        alpha = theorem_step_size(metric, 1.0, 0.8, 1.0, 4.0, T=1)
        assert abs(alpha - float(ref[5])) <= 1e-12 * float(ref[5])

    @pytest.mark.parametrize("metric", [1, 2, 3])
    def test_crossover(self, metric):
        lip = (1.0, 0.5, 0.25)
        lam = 10.0
        c = theorem_constants(metric, 1.0, 0.8, 1.0, lam, lip)
        t_star = step_size_crossover(c, 1.0, 0.8)
        smooth, decay = step_size_arms(c, 1.0, 0.8, t_star)
        assert decay == pytest.approx(smooth, rel=1e-12)
        below = theorem_step_size(metric, 1.0, 0.8, 1.0, lam, max(1, int(t_star / 2)), lip)
        above = theorem_step_size(metric, 1.0, 0.8, 1.0, lam, int(4 * t_star) + 1, lip)
        assert below == pytest.approx(smooth, rel=1e-12)
        assert above < smooth

    @settings(max_examples=100, deadline=None)
    @given(metric=st.sampled_from([1, 2, 3]), gamma=st.floats(0.05, 0.99),
           a=st.floats(0.01, 10.0), slack=st.floats(1.01, 100.0), T=st.integers(1, 10 ** 6))
    def test_positive(self, metric, gamma, a, slack, T):
        lam = slack * (2 * a if metric < 3 else 6 * a)
        assert theorem_step_size(metric, 1.0, gamma, a, lam, T) > 0

    def test_lambda_preconditions(self):
        with pytest.raises(ValueError):
            theorem_constants(1, 1.0, 0.8, 1.0, 1.9)
        with pytest.raises(ValueError):
            theorem_constants(2, 1.0, 0.8, 1.0, 1.0)
        with pytest.raises(ValueError):
            theorem_constants(3, 1.0, 0.8, 1.0, 6.0)
        theorem_constants(3, 1.0, 0.8, 1.0, 6.01)


class TestTraining:
    def test_stationary_start(self):
        mdp = preset_distribution("low", seed=0, n_tasks=1, rho_mix=0.05).tasks[0]
        opt = optimal_softmax_policy(mdp, tol=1e-10).policy
        td = TaskDistribution.uniform([mdp])
        cfg = MetaTrainConfig(iterations=5, alpha=1.0, adapt=AdaptConfig(metric=2, lam=0.25))
        tr = meta_train(td, opt, cfg)
        assert tr.grad_norms().max() < 1e-6
        assert np.abs(tr.phi.theta - opt.theta).max() < 1e-6

    def test_swapped_bandits_stay_symmetric(self):
        td = TaskDistribution.uniform([bandit([1.0, 0.0]), bandit([0.0, 1.0])])
        for metric in (1, 2, 3):
            cfg = MetaTrainConfig(iterations=20, alpha=0.5, batch_size=2,
                                  adapt=AdaptConfig(metric=metric, lam=3.0))
            th = meta_train_batched(td, SoftmaxPolicy.uniform(1, 2), cfg).phi.theta
            assert abs(th[0, 0] - th[0, 1]) < 1e-9

    def test_deterministic(self):
        td = preset_distribution("low", seed=1, n_tasks=4, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=15, alpha=1.0, batch_size=2, seed=3,
                              adapt=AdaptConfig(metric=2, lam=0.25))
        a = meta_train_batched(td, SoftmaxPolicy.uniform(16, 4), cfg)
        b = meta_train_batched(td, SoftmaxPolicy.uniform(16, 4), cfg)
        assert np.array_equal(a.phi.theta, b.phi.theta)
        assert [(r.task_ids, r.grad_norm, r.meta_obj) for r in a.records] == \
            [(r.task_ids, r.grad_norm, r.meta_obj) for r in b.records]

    def test_batch_one_is_meta_train(self):
        td = preset_distribution("low", seed=1, n_tasks=4, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=10, alpha=1.0, batch_size=1, seed=5,
                              adapt=AdaptConfig(metric=3, lam=0.02))
        a = meta_train(td, SoftmaxPolicy.uniform(16, 4), cfg.with_(batch_size=3))
        b = meta_train_batched(td, SoftmaxPolicy.uniform(16, 4), cfg)
        assert np.array_equal(a.phi.theta, b.phi.theta)

    def test_infinite_clip_is_unclipped(self):
        td = preset_distribution("high", seed=1, n_tasks=3, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=8, alpha=1.0, batch_size=2,
                              adapt=AdaptConfig(metric=1, lam=0.5, strict=False))
        a = meta_train_batched(td, SoftmaxPolicy.uniform(16, 4), cfg)
        b = meta_train_batched(td, SoftmaxPolicy.uniform(16, 4),
                               cfg.with_(step_rule=FIXED_CLIP, clip_norm=np.inf))
        assert np.array_equal(a.phi.theta, b.phi.theta)

    def test_clipping_limits_step(self):
        td = preset_distribution("high", seed=1, n_tasks=3, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=1, alpha=1.0, batch_size=3, step_rule=FIXED_CLIP,
                              clip_norm=1e-4, adapt=AdaptConfig(metric=2, lam=0.5))
        init = SoftmaxPolicy.uniform(16, 4)
        tr = meta_train_batched(td, init, cfg)
        assert np.linalg.norm(tr.phi.theta - init.theta) == pytest.approx(1e-4, rel=1e-12)

    def test_full_batch_is_exact_expectation(self):
        td = preset_distribution("low", seed=2, n_tasks=2, rho_mix=0.05)
        acfg = AdaptConfig(metric=2, lam=0.25)
        init = SoftmaxPolicy.tabular(np.random.default_rng(0).normal(size=(16, 4)))
        cfg = MetaTrainConfig(iterations=1, alpha=1.0, batch_size=2, adapt=acfg)
        tr = meta_train_batched(td, init, cfg)
        g0 = task_outer_gradient(td.tasks[0], init, acfg)[0]
        g1 = task_outer_gradient(td.tasks[1], init, acfg)[0]
        hand = 0.5 * g0 + 0.5 * g1
        assert np.abs((tr.phi.theta - init.theta) - hand).max() < 1e-12
        assert np.abs(averaged_gradient(td, init, acfg, [0, 1]) - hand).max() < 1e-12

    def test_theorem_step_full_batch_monotone(self):
        td = preset_distribution("low", seed=0, n_tasks=3, rho_mix=0.05)
        # theorem step needs lam >= 2 A_max with A_max = r_max / (1 - gamma) = 10
        cfg = MetaTrainConfig(iterations=15, step_rule=THEOREM, batch_size=3,
                              track_objective=True, adapt=AdaptConfig(metric=2, lam=21.0))
        tr = meta_train_batched(td, SoftmaxPolicy.uniform(16, 4), cfg)
        obj = np.array([r.full_obj for r in tr.records])
        assert tr.alpha > 0 and np.all(np.diff(obj) >= -1e-10)

    def test_single_task_sgd_trend(self):
        td = preset_distribution("low", seed=0, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=500, alpha=1.0, seed=0,
                              adapt=AdaptConfig(metric=2, lam=0.25))
        g2 = meta_train(td, SoftmaxPolicy.uniform(16, 4), cfg).grad_norms() ** 2
        assert g2[-100:].mean() < g2[:100].mean()

    def test_error_names_iteration(self):
        td = preset_distribution("high", seed=0, n_tasks=2, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=3, adapt=AdaptConfig(metric=1, lam=1e-4))
        with pytest.raises(LambdaTooSmall, match="iteration 0"):
            meta_train(td, SoftmaxPolicy.uniform(16, 4), cfg)

    def test_shape_mismatch(self):
        td = TaskDistribution.uniform([bandit([1.0, 0.0])])
        with pytest.raises(ValueError):
            meta_train(td, SoftmaxPolicy.uniform(2, 2), MetaTrainConfig())

    def test_maml_algorithm_runs(self):
        td = preset_distribution("low", seed=0, n_tasks=2, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=3, batch_size=2, algorithm=MAML,
                              adapt=AdaptConfig(metric=2, lam=0.25))
        tr = meta_train_batched(td, SoftmaxPolicy.uniform(16, 4), cfg)
        assert len(tr) == 3 and np.all(np.isfinite(tr.phi.theta))

    def test_invalid_config(self):
        for kw in ({"iterations": 0}, {"alpha": 0.0}, {"step_rule": "adam"},
                   {"batch_size": 0}, {"clip_norm": 0.0}, {"algorithm": "trpo"}):
            with pytest.raises(ValueError):
                MetaTrainConfig(**kw)


class TestArtifacts:
    def _trace(self):
        td = preset_distribution("low", seed=0, n_tasks=3, rho_mix=0.05)
        cfg = MetaTrainConfig(iterations=6, batch_size=2, checkpoint_every=3,
                              adapt=AdaptConfig(metric=2, lam=0.25))
        return meta_train_batched(td, SoftmaxPolicy.uniform(16, 4), cfg)

    def test_trace_csv(self, tmp_path):
        tr = self._trace()
        tr.write_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iter,task_id,grad_norm,meta_obj,ms" and len(lines) == 7
        tr.write_csv(tmp_path / "u.csv", timing=False)
        assert (tmp_path / "u.csv").read_text().splitlines()[0] == "iter,task_id,grad_norm,meta_obj"

    def test_checkpoints(self, tmp_path):
        tr = self._trace()
        tr.write_checkpoints(tmp_path)
        files = sorted(p.name for p in tmp_path.iterdir())
        assert files == ["checkpoint_000003.json", "checkpoint_000006.json"]
        doc = json.loads((tmp_path / files[-1]).read_text())
        assert set(doc) == {"iteration", "phi", "rng_state_digest"}
        assert np.allclose(SoftmaxPolicy.from_json(doc["phi"]).theta, tr.phi.theta)
