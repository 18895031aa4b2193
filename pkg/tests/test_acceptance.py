"""End-to-end experiments on the default 8x8 grid; minutes each, opt in with TVD_SLOW_TESTS=1."""

import math
import os
import unittest

import flax.nnx as nnx
import jax
import jax.numpy as jnp
import numpy as np
from scipy.stats import spearmanr

from models.policy import EdgeFollowingExpert, Policy, PolicyActor, evaluate_actor, evaluate_policy
from models.potentials import DualPotentials, FPotential
from tvd import SourcePolicy, TvD, TvDConfig
from utils.costs import CostSpec
from utils.dataloader import DemoSet
from utils.divergences import (
    KL_CONJUGATE_OFFSET,
    DivergenceSpec,
    f_div_objective,
    point_samples,
    trajectory_samples,
    update_f_potential,
    update_potentials,
    wasserstein_objective,
)
from utils.gridworld import GridWorldSpec, StateTransform, episode_keys, rollout_batch
from utils.oracles import (
    enumerate_action_sequences,
    exact_expectation,
    exact_ot,
    fdiv_exact,
    toy_corridor_spec,
    trajectories_from_actions,
)
from utils.source_training import REGIMES, train_source, verify_regime

SLOW = os.environ.get("TVD_SLOW_TESTS") == "1"
GRID = GridWorldSpec()
SEED = 0


@unittest.skipUnless(SLOW, "set TVD_SLOW_TESTS=1")
class DivergenceFidelityTest(unittest.TestCase):

    def test_trained_dual_matches_exact_transport(self):
        div = DivergenceSpec(
            alpha=50.0,
            cost=CostSpec(mode="state_l2"),
            inner_steps=2000,
            potential_lr=1e-2,
            potential_optimizer="adam",
            hidden_dims=(64, 64),
        )
        rng = np.random.default_rng(SEED)
        for pair in range(20):
            k, n = rng.integers(1, 7, size=2)
            points1 = rng.integers(0, 8, size=(k, 2)).astype(np.float64)
            points2 = rng.integers(0, 8, size=(n, 2)).astype(np.float64)
            w1, w2 = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(n))
            exact = exact_ot(points1, w1, points2, w2)
            batch1, batch2 = point_samples(points1, w1, GRID), point_samples(points2, w2, GRID)
            potentials = DualPotentials(2, div.hidden_dims, nnx.Rngs(pair))
            params, _ = update_potentials(batch1, batch2, potentials, potentials.init_params(), div)
            estimate = float(wasserstein_objective(batch1, batch2, potentials, params, div))
            self.assertLessEqual(abs(estimate - exact), 0.1 * max(exact, 1.0), msg=f"pair {pair}")

    def test_trained_f_potentials_reach_closed_form(self):
        points = jnp.array([[0.0, 0.0], [2.0, 1.0], [5.0, 3.0], [7.0, 7.0]])
        p_N = jnp.array([0.4, 0.3, 0.2, 0.1])
        q_N = jnp.array([0.1, 0.2, 0.3, 0.4])
        batch1, batch2 = point_samples(points, p_N, GRID), point_samples(points, q_N, GRID)
        for kind in ("chi2", "tv", "kl"):
            potential = FPotential(2, (64,), nnx.Rngs(SEED))
            params, _ = update_f_potential(
                batch1, batch2, potential, potential.init_params(), kind, 1e-2, steps=3000, optimizer="adam"
            )
            value = float(f_div_objective(batch1, batch2, potential, params, kind))
            if kind == "kl":
                value += KL_CONJUGATE_OFFSET
            exact = fdiv_exact(p_N, q_N, kind)
            self.assertLessEqual(value, exact + 0.05, msg=kind)
            self.assertGreaterEqual(value, 0.9 * exact, msg=kind)


@unittest.skipUnless(SLOW, "set TVD_SLOW_TESTS=1")
class MonteCarloEstimatorTest(unittest.TestCase):

    def test_sampled_omega_gradient_is_within_three_standard_errors(self):
        spec = toy_corridor_spec()
        rotation = StateTransform.rotation(math.pi, spec)

        policy = Policy(spec, nnx.Rngs(0), hidden_dims=(8,))
        theta = policy.init_params + 0.8 * jax.random.normal(jax.random.key(1), policy.init_params.shape)
        cfg = TvDConfig(
            divergence=DivergenceSpec(batch_size=5, hidden_dims=(8,)), rollout_batch=2, error_samples=10
        )
        tvd = TvD(cfg, spec, rotation, SourcePolicy(policy, theta))
        omega = tvd.undo_map.init_params(jax.random.key(2), 0.3)
        potential_params = tvd.potentials.init_params()
        sequences = enumerate_action_sequences(spec)
        observed_T = trajectories_from_actions(spec, rotation, sequences)
        source = trajectories_from_actions(spec, StateTransform(center=spec.center), sequences[:5])
        source_samples = trajectory_samples(source, spec, tvd.cost)

        def objective(w):
            values_N, target = tvd.target_values(w, source_samples, observed_T, potential_params)
            return exact_expectation(tvd.trajectory_log_prob(theta, w, observed_T), values_N)

        exact = np.asarray(jax.grad(objective)(omega))

        def sampled(key):
            observed, _ = tvd.undone_rollout_batch(omega, theta, key)
            return jax.grad(tvd.surrogate_loss, argnums=1)(theta, omega, source_samples, observed, potential_params)

        keys = jax.random.split(jax.random.key(SEED), 5000)
        grads_MP = np.asarray(jax.lax.map(sampled, keys))
        mean_P = grads_MP.mean(axis=0)
        se_P = grads_MP.std(axis=0, ddof=1) / math.sqrt(len(keys))
        np.testing.assert_array_less(np.abs(mean_P - exact), 3 * se_P + 1e-12)


@unittest.skipUnless(SLOW, "set TVD_SLOW_TESTS=1")
class TransferTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sources = {regime: train_source(GRID, regime, SEED) for regime in REGIMES}
        cls.rotation = StateTransform.rotation(math.pi / 2, GRID)

    def test_regimes_pass_their_gates(self):
        for regime, result in self.sources.items():
            self.assertEqual(verify_regime(regime, result.evaluation), [], msg=regime)

    def _source_episodes(self, regime: str):
        result = self.sources[regime]
        _, trajectories = evaluate_actor(
            GRID,
            StateTransform(center=GRID.center),
            PolicyActor(result.policy),
            {"theta": result.theta},
            200,
            jax.random.key(SEED),
        )
        return trajectories

    def test_regime_episode_statistics(self):
        high = self._source_episodes("high_entropy_optimal")
        actions_BH, lengths_B = np.asarray(high.actions), np.asarray(high.length)
        reached_B = np.asarray(high.reached_goal)
        paths = {tuple(actions_BH[b, : lengths_B[b]]) for b in range(200) if reached_B[b]}
        self.assertGreaterEqual(len(paths), 30)

        low = self._source_episodes("low_entropy_optimal")
        returns, counts = np.unique(np.asarray(low.returns), return_counts=True)
        self.assertEqual(float(returns[np.argmax(counts)]), -14.0)

        suboptimal = self._source_episodes("high_entropy_suboptimal")
        self.assertFalse(bool(np.all(np.asarray(suboptimal.reached_goal))))

    def _transfer(self, regime: str):
        result = self.sources[regime]
        tvd = TvD(TvDConfig(seed=SEED), GRID, self.rotation, SourcePolicy(result.policy, result.theta))
        return tvd, tvd.run()

    def _composed_goal_rate(self, tvd, omega, regime="high_entropy_optimal") -> float:
        result = self.sources[regime]
        return evaluate_policy(
            GRID, self.rotation, result.policy, result.theta, tvd.undo_map, omega, episodes=200, seed=SEED
        ).goal_rate

    def test_high_entropy_source_learns_the_undo_map(self):
        tvd, state = self._transfer("high_entropy_optimal")
        self.assertLess(state.rows()[-1].undo_map_error, 0.5)
        self.assertGreaterEqual(self._composed_goal_rate(tvd, state.params["omega"]), 0.9)

    def test_suboptimal_source_undo_map_transfers_to_optimal_policy(self):
        tvd, state = self._transfer("high_entropy_suboptimal")
        self.assertLess(state.rows()[-1].undo_map_error, 0.5)
        self.assertGreaterEqual(self._composed_goal_rate(tvd, state.params["omega"]), 0.9)

    def test_low_entropy_source_plateaus(self):
        tvd, state = self._transfer("low_entropy_optimal")
        rows = state.rows()
        estimates = [row.wasserstein_estimate for row in rows]
        self.assertLess(spearmanr(np.arange(len(estimates)), estimates).statistic, -0.5)
        self.assertGreater(rows[-1].undo_map_error, 2.0)
        self.assertLess(self._composed_goal_rate(tvd, state.params["omega"], "low_entropy_optimal"), 0.2)

    def test_exact_inverse_is_indistinguishable_from_source(self):
        result = self.sources["high_entropy_optimal"]
        tvd = TvD(TvDConfig(seed=SEED), GRID, self.rotation, SourcePolicy(result.policy, result.theta))
        omega = tvd.undo_map.exact_inverse_params(self.rotation)
        div = DivergenceSpec(inner_steps=500, hidden_dims=(64, 64))
        baseline, adapted = [], []
        for i in range(5):
            key = jax.random.key(100 + i)
            source = trajectory_samples(tvd.source_batch(jax.random.fold_in(key, 0), 32), GRID, tvd.cost)
            other = trajectory_samples(tvd.source_batch(jax.random.fold_in(key, 1), 32), GRID, tvd.cost)
            _, undone = tvd.undone_rollout_batch(omega, result.theta, jax.random.fold_in(key, 2), 32)
            undone = trajectory_samples(undone, GRID, tvd.cost)
            for batch, values in ((other, baseline), (undone, adapted)):
                params, _ = update_potentials(source, batch, tvd.potentials, tvd.potentials.init_params(), div)
                values.append(float(wasserstein_objective(source, batch, tvd.potentials, params, div)))
        self.assertLessEqual(np.mean(adapted), np.mean(baseline) + 3 * np.std(baseline) + 0.05)


@unittest.skipUnless(SLOW, "set TVD_SLOW_TESTS=1")
class ImitationTest(unittest.TestCase):

    def test_demonstrations_are_imitated(self):
        identity = StateTransform(center=GRID.center)
        demos = DemoSet(
            rollout_batch(GRID, identity, EdgeFollowingExpert(GRID), None, episode_keys(jax.random.key(SEED), 10)),
            GRID,
        )
        cfg = TvDConfig(freeze_policy=False, learn_undo_map=False, outer_iterations=300, seed=SEED)
        tvd = TvD(cfg, GRID, identity, demos)
        state = tvd.run()
        rows = state.rows()
        self.assertLess(rows[-1].wasserstein_estimate, 0.1 * rows[0].wasserstein_estimate)
        evaluation = evaluate_policy(GRID, identity, tvd.policy, state.params["theta"], episodes=200, seed=SEED)
        self.assertGreaterEqual(evaluation.goal_rate, 0.9)


if __name__ == "__main__":
    unittest.main()
