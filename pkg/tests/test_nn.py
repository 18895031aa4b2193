import unittest

import flax.nnx as nnx
import jax
import jax.numpy as jnp
import numpy as np

from utils.nn import Architecture, DifferentiableFunction


class DifferentiableFunctionTest(unittest.TestCase):

    def setUp(self):
        self.architecture = Architecture(in_dim=2, hidden_dims=(3,), out_dim=1)
        self.fn = DifferentiableFunction(self.architecture, nnx.Rngs(0))

    def test_parameter_count(self):
        self.assertEqual(self.fn.num_params, 2 * 3 + 3 + 3 * 1 + 1)
        self.assertEqual(self.fn.init_params.dtype, jnp.float64)

    def test_forward_shape_for_any_leading_axes(self):
        self.assertEqual(self.fn(self.fn.init_params, jnp.zeros((4, 5, 2))).shape, (4, 5, 1))
        self.assertEqual(self.fn.forward(self.fn.init_params, jnp.zeros((2,))).shape, (1,))

    def test_same_seed_gives_same_parameters(self):
        other = DifferentiableFunction(self.architecture, nnx.Rngs(0))
        np.testing.assert_array_equal(np.asarray(other.init_params), np.asarray(self.fn.init_params))

    def test_zero_init_output_starts_at_zero(self):
        fn = DifferentiableFunction(self.architecture, nnx.Rngs(1), zero_init_output=True)
        x = jax.random.normal(jax.random.key(0), (8, 2))
        np.testing.assert_array_equal(np.asarray(fn(fn.init_params, x)), 0.0)

    def test_constant_params(self):
        params = self.fn.constant_params(2.5)
        x = jax.random.normal(jax.random.key(0), (8, 2))
        np.testing.assert_allclose(np.asarray(self.fn(params, x)), 2.5)

    def test_edited_module_flattens_back(self):
        np.testing.assert_array_equal(
            np.asarray(self.fn.flatten(self.fn.module(self.fn.init_params))), np.asarray(self.fn.init_params)
        )
        module = self.fn.module(self.fn.init_params)
        module.output_dense.kernel.value = jnp.zeros((3, 1))
        module.output_dense.bias.value = jnp.array([-1.5])
        params = self.fn.flatten(module)
        np.testing.assert_allclose(np.asarray(self.fn(params, jnp.ones((4, 2)))), -1.5)

    def test_grad_params_matches_finite_differences(self):
        x = jnp.array([0.3, -0.7])
        params = self.fn.init_params
        jac_OP = np.asarray(self.fn.grad_params(params, x))
        eps = 1e-6
        for p in range(self.fn.num_params):
            delta = jnp.zeros_like(params).at[p].set(eps)
            fd = (self.fn(params + delta, x) - self.fn(params - delta, x)) / (2 * eps)
            np.testing.assert_allclose(jac_OP[:, p], np.asarray(fd), rtol=1e-4, atol=1e-8)

    def test_grad_input_matches_finite_differences(self):
        x = jnp.array([0.3, -0.7])
        params = self.fn.init_params
        jac_OI = np.asarray(self.fn.grad_input(params, x))
        eps = 1e-6
        for i in range(2):
            delta = jnp.zeros(2).at[i].set(eps)
            fd = (self.fn(params, x + delta) - self.fn(params, x - delta)) / (2 * eps)
            np.testing.assert_allclose(jac_OI[:, i], np.asarray(fd), rtol=1e-4, atol=1e-8)


class ArchitectureTest(unittest.TestCase):

    def test_dict_round_trip(self):
        architecture = Architecture(2, (32, 32), 4, "relu")
        self.assertEqual(Architecture.from_dict(architecture.to_dict()), architecture)

    def test_unknown_activation_raises(self):
        with self.assertRaises(ValueError):
            Architecture(2, (8,), 1, "swish")


if __name__ == "__main__":
    unittest.main()
