import unittest

import flax.nnx as nnx
import jax
import jax.numpy as jnp
import numpy as np

from models.potentials import DualPotentials, FPotential
from utils.costs import CostSpec, dtw
from utils.divergences import (
    KL_CONJUGATE_OFFSET,
    KL_EXP_CLAMP,
    DivergenceError,
    DivergenceSpec,
    check_finite,
    conjugate,
    conjugate_slope,
    f_div_objective,
    f_potential_ascent_direction,
    feature_dim,
    featurize,
    pair_costs,
    point_samples,
    trajectory_samples,
    update_f_potential,
    update_potentials,
    wasserstein_ascent_direction,
    wasserstein_estimate,
    wasserstein_objective,
)
from utils.gridworld import Action, GridWorldSpec, StateTransform
from utils.oracles import enumerate_action_sequences, fdiv_exact, toy_corridor_spec, trajectories_from_actions
from utils.preprocess import normalize_coordinates

STATE_MODE = CostSpec(mode="state_l2")


def _discrete_pair(spec: GridWorldSpec):
    points_ND = jnp.array([[0.0, 0.0], [2.0, 1.0], [5.0, 3.0], [7.0, 7.0]])
    p_N = jnp.array([0.4, 0.3, 0.2, 0.1])
    q_N = jnp.array([0.1, 0.2, 0.3, 0.4])
    return point_samples(points_ND, p_N, spec), point_samples(points_ND, q_N, spec), p_N, q_N


class WassersteinDualTest(unittest.TestCase):

    def setUp(self):
        self.spec = GridWorldSpec()
        self.div = DivergenceSpec(alpha=10.0, cost=STATE_MODE, hidden_dims=(16,))
        self.potentials = DualPotentials(2, (16,), nnx.Rngs(0))
        self.batch1, self.batch2, _, _ = _discrete_pair(self.spec)

    def _constant(self, h, g):
        return {"h": self.potentials.h_net.constant_params(h), "g": self.potentials.g_net.constant_params(g)}

    def test_zero_potentials_give_zero(self):
        value = wasserstein_objective(self.batch1, self.batch2, self.potentials, self._constant(0.0, 0.0), self.div)
        self.assertAlmostEqual(float(value), 0.0, places=12)

    def test_constant_potentials_closed_form(self):
        h, g = 0.5, 1.0
        cost_KN = np.asarray(pair_costs(self.batch1, self.batch2, STATE_MODE))
        w1, w2 = np.asarray(self.batch1.weights_N), np.asarray(self.batch2.weights_N)
        expected = h + g - 10.0 * (w1 @ np.maximum(h + g - cost_KN, 0.0) @ w2)
        value = wasserstein_objective(self.batch1, self.batch2, self.potentials, self._constant(h, g), self.div)
        self.assertAlmostEqual(float(value), expected, places=10)

    def test_ascent_direction_is_objective_gradient(self):
        params = self.potentials.init_params()
        cost_KN = pair_costs(self.batch1, self.batch2, STATE_MODE)
        direction = wasserstein_ascent_direction(self.batch1, self.batch2, self.potentials, params, self.div, cost_KN)
        grad = jax.grad(
            lambda p: wasserstein_objective(self.batch1, self.batch2, self.potentials, p, self.div, cost_KN)
        )(params)
        for name in ("h", "g"):
            np.testing.assert_allclose(np.asarray(direction[name]), np.asarray(grad[name]), rtol=1e-10, atol=1e-12)

    def test_update_potentials_increases_objective(self):
        div = DivergenceSpec(alpha=10.0, cost=STATE_MODE, potential_lr=1e-3, inner_steps=20, hidden_dims=(16,))
        params = self.potentials.init_params()
        before = wasserstein_objective(self.batch1, self.batch2, self.potentials, params, div)
        params, _ = update_potentials(self.batch1, self.batch2, self.potentials, params, div)
        after = wasserstein_objective(self.batch1, self.batch2, self.potentials, params, div)
        self.assertGreater(float(after), float(before))

    def test_update_potentials_rejects_non_finite_params(self):
        params = self._constant(0.0, 0.0)
        params["h"] = params["h"].at[0].set(jnp.nan)
        div = DivergenceSpec(alpha=10.0, cost=STATE_MODE, inner_steps=1, hidden_dims=(16,))
        with self.assertRaises(DivergenceError) as ctx:
            update_potentials(self.batch1, self.batch2, self.potentials, params, div)
        self.assertIn("potentials", ctx.exception.tensor)

    def test_identical_distributions_train_to_zero(self):
        batch = point_samples(jnp.array([[2.0, 5.0]]), jnp.ones(1), self.spec)
        div = DivergenceSpec(alpha=10.0, cost=STATE_MODE, potential_lr=1e-5, inner_steps=2000, hidden_dims=(16,))
        params, _ = update_potentials(batch, batch, self.potentials, self._constant(0.0, -0.02), div)
        estimate = wasserstein_estimate(batch, batch, self.potentials, params, div)
        self.assertAlmostEqual(float(estimate.value), 0.0, delta=1e-3)

    def test_point_masses_train_to_their_distance(self):
        batch1 = point_samples(jnp.array([[0.0, 0.0]]), jnp.ones(1), self.spec)
        batch2 = point_samples(jnp.array([[3.0, 4.0]]), jnp.ones(1), self.spec)
        div = DivergenceSpec(alpha=10.0, cost=STATE_MODE, potential_lr=1e-3, inner_steps=3000, hidden_dims=(16,))
        params, _ = update_potentials(batch1, batch2, self.potentials, self._constant(0.0, 0.0), div)
        estimate = wasserstein_estimate(batch1, batch2, self.potentials, params, div)
        self.assertLess(abs(float(estimate.value) - 5.0), 0.5)

    def test_hinge_violation_rate(self):
        cost_KN = np.asarray(pair_costs(self.batch1, self.batch2, STATE_MODE))
        w1, w2 = np.asarray(self.batch1.weights_N), np.asarray(self.batch2.weights_N)
        estimate = wasserstein_estimate(self.batch1, self.batch2, self.potentials, self._constant(3.0, 3.0), self.div)
        expected = w1 @ (cost_KN < 6.0).astype(np.float64) @ w2
        self.assertGreater(expected, 0.0)
        self.assertAlmostEqual(float(estimate.hinge_violation_rate), float(expected), places=12)
        zero = wasserstein_estimate(self.batch1, self.batch2, self.potentials, self._constant(0.0, 0.0), self.div)
        self.assertEqual(float(zero.hinge_violation_rate), 0.0)

    def test_invalid_spec_raises(self):
        with self.assertRaises(ValueError):
            DivergenceSpec(kind="hellinger")
        with self.assertRaises(ValueError):
            DivergenceSpec(alpha=0.0)


class SampleTest(unittest.TestCase):

    def setUp(self):
        self.spec = toy_corridor_spec()
        sequences = enumerate_action_sequences(self.spec)
        self.trajectories = trajectories_from_actions(
            self.spec, StateTransform(center=self.spec.center), sequences[:6]
        )

    def test_trajectory_mode_features(self):
        dtw_mode = CostSpec()
        samples = trajectory_samples(self.trajectories, self.spec, dtw_mode)
        self.assertEqual(samples.features_NF.shape, (6, feature_dim(self.spec, dtw_mode)))
        self.assertEqual(feature_dim(self.spec, dtw_mode), 2 * self.spec.horizon + 1)
        np.testing.assert_allclose(float(jnp.sum(samples.weights_N)), 1.0)
        first = jax.tree.map(lambda x: x[0], self.trajectories)
        np.testing.assert_allclose(
            np.asarray(featurize(first, self.spec, dtw_mode)), np.asarray(samples.features_NF[0]), atol=1e-12
        )

    def test_state_mode_weights_form_visitation_distribution(self):
        samples = trajectory_samples(self.trajectories, self.spec, STATE_MODE)
        weights_BS = np.asarray(samples.weights_N).reshape(6, -1)
        np.testing.assert_allclose(weights_BS.sum(), 1.0)
        lengths_B = np.asarray(self.trajectories.length)
        for b in range(6):
            np.testing.assert_allclose(weights_BS[b].sum(), 1.0 / 6)
            self.assertEqual(int(np.count_nonzero(weights_BS[b])), lengths_B[b] + 1)

    def test_state_mode_flattens_batch_and_time(self):
        samples = trajectory_samples(self.trajectories, self.spec, STATE_MODE)
        S = self.trajectories.states.shape[1]
        self.assertEqual(samples.states_NSD.shape, (6 * S, 1, 2))
        np.testing.assert_allclose(
            np.asarray(samples.states_NSD[S + 1, 0]), np.asarray(self.trajectories.states[1, 1])
        )

    def test_single_step_trajectory_repeats_last_state(self):
        spec = GridWorldSpec()
        trajectories = trajectories_from_actions(spec, StateTransform(center=spec.center), [(int(Action.RIGHT),)])
        single = jax.tree.map(lambda x: x[0], trajectories)
        features = np.asarray(featurize(single, spec, CostSpec()))
        self.assertEqual(features.shape, (2 * spec.horizon + 1,))
        expected_D = np.asarray(normalize_coordinates(jnp.array([1.0, 0.0]), spec.width, spec.height))
        np.testing.assert_allclose(features[:-1].reshape(spec.horizon, 2), np.tile(expected_D, (spec.horizon, 1)))
        self.assertAlmostEqual(float(features[-1]), 0.02, places=12)

    def test_dtw_pair_costs_match_dtw(self):
        samples = trajectory_samples(self.trajectories, self.spec, CostSpec())
        cost_KN = np.asarray(pair_costs(samples, samples, CostSpec()))
        states_BSD = np.asarray(self.trajectories.states)
        lengths_B = np.asarray(self.trajectories.length)
        for k in (0, 3):
            for n in (1, 5):
                expected = dtw(states_BSD[k, : lengths_B[k] + 1], states_BSD[n, : lengths_B[n] + 1]).distance
                self.assertAlmostEqual(float(cost_KN[k, n]), float(expected), places=12)


class FDivergenceTest(unittest.TestCase):

    def setUp(self):
        self.spec = GridWorldSpec()
        self.batch1, self.batch2, self.p_N, self.q_N = _discrete_pair(self.spec)
        self.potential = FPotential(2, (16,), nnx.Rngs(0))

    def test_conjugate_slope_matches_finite_differences(self):
        g_N = jnp.linspace(-0.45, 0.45, 7)
        eps = 1e-6
        for kind in ("chi2", "tv", "kl"):
            fd_N = (conjugate(kind, g_N + eps) - conjugate(kind, g_N - eps)) / (2 * eps)
            np.testing.assert_allclose(np.asarray(conjugate_slope(kind, g_N)), np.asarray(fd_N), rtol=1e-4)

    def test_kl_conjugate_is_clamped(self):
        np.testing.assert_allclose(float(conjugate("kl", jnp.array(100.0))), np.exp(KL_EXP_CLAMP), rtol=1e-12)
        self.assertEqual(float(conjugate_slope("kl", jnp.array(100.0))), 0.0)

    def test_unknown_kind_raises(self):
        with self.assertRaises(ValueError):
            conjugate("wasserstein", jnp.zeros(2))

    def test_variational_value_is_a_lower_bound(self):
        for seed in range(3):
            params = FPotential(2, (16,), nnx.Rngs(seed)).init_params() * 3.0
            for kind in ("chi2", "tv", "kl"):
                value = float(f_div_objective(self.batch1, self.batch2, self.potential, params, kind))
                if kind == "kl":
                    value += KL_CONJUGATE_OFFSET
                self.assertLessEqual(value, fdiv_exact(self.p_N, self.q_N, kind) + 1e-9)

    def test_ascent_direction_is_objective_gradient(self):
        params = self.potential.init_params()
        for kind in ("chi2", "tv", "kl"):
            direction = f_potential_ascent_direction(self.batch1, self.batch2, self.potential, params, kind)
            grad = jax.grad(lambda p: f_div_objective(self.batch1, self.batch2, self.potential, p, kind))(params)
            np.testing.assert_allclose(np.asarray(direction), np.asarray(grad), rtol=1e-10, atol=1e-12)

    def test_update_rejects_non_finite_params(self):
        params = self.potential.init_params().at[0].set(jnp.inf)
        with self.assertRaises(DivergenceError) as ctx:
            update_f_potential(self.batch1, self.batch2, self.potential, params, "chi2", lr=1e-3)
        self.assertIn("potential", ctx.exception.tensor)


class CheckFiniteTest(unittest.TestCase):

    def test_reports_tensor_and_iteration(self):
        check_finite({"omega": jnp.ones(4)}, "params", 3)
        with self.assertRaises(DivergenceError) as ctx:
            check_finite({"omega": jnp.array([1.0, jnp.nan])}, "params", 7)
        self.assertEqual(ctx.exception.iteration, 7)
        self.assertIn("omega", ctx.exception.tensor)


if __name__ == "__main__":
    unittest.main()
