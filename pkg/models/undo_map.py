from typing import Literal

import flax.nnx as nnx
import jax
import jax.numpy as jnp
import numpy as np

from utils.gridworld import GridWorldSpec, StateTransform
from utils.nn import Architecture, DifferentiableFunction
from utils.preprocess import denormalize_coordinates, normalize_coordinates

UNDO_FAMILIES = ("linear", "affine", "mlp")


class UndoMap:
    """Parametric map u_omega from target-domain states to source-domain states.

    linear: omega = row-major 2x2 matrix M, u(s) = c + M (s - c).
    affine: omega = (M, b), u(s) = c + M (s - c) + b.
    mlp:    residual network in normalized coordinates, u = identity at zero output.

    c is the grid center. Hashable by identity so it can be closed over by
    compiled rollouts.

    Dimension keys:
        B: batch size (any number of leading axes)
        D: coordinate dimension
        P: number of parameters
    """

    def __init__(
        self,
        spec: GridWorldSpec,
        family: Literal["linear", "affine", "mlp"] = "linear",
        hidden_dims: tuple[int, ...] = (32, 32),
        rngs: nnx.Rngs | None = None,
    ):
        if family not in UNDO_FAMILIES:
            raise ValueError(f"Unknown undo-map family {family!r}, use one of {UNDO_FAMILIES}")
        self.spec = spec
        self.family = family
        self.hidden_dims = tuple(hidden_dims)
        self.center_D = jnp.asarray(spec.center, dtype=jnp.float64)
        self.net = None
        if family == "mlp":
            rngs = nnx.Rngs(0) if rngs is None else rngs
            self.net = DifferentiableFunction(
                Architecture(2, tuple(hidden_dims), 2, "tanh"), rngs, zero_init_output=True
            )

    @property
    def num_params(self) -> int:
        if self.family == "linear":
            return 4
        if self.family == "affine":
            return 6
        return self.net.num_params

    def identity_params(self) -> jax.Array:
        if self.family == "mlp":
            return self.net.init_params
        return self.params_from_matrix(np.eye(2))

    def init_params(self, key: jax.Array, scale: float = 0.0) -> jax.Array:
        """Identity map perturbed by N(0, scale^2) noise on every parameter."""
        params_P = self.identity_params()
        return params_P + scale * jax.random.normal(key, params_P.shape, dtype=params_P.dtype)

    def params_from_matrix(self, matrix: np.ndarray, offset=(0.0, 0.0)) -> jax.Array:
        if self.family == "mlp":
            raise ValueError("The mlp family has no matrix parametrization.")
        m = jnp.asarray(matrix, dtype=jnp.float64).reshape(4)
        if self.family == "linear":
            if np.any(np.asarray(offset) != 0.0):
                raise ValueError("The linear family has no offset.")
            return m
        return jnp.concatenate([m, jnp.asarray(offset, dtype=jnp.float64)])

    def exact_inverse_params(self, transform: StateTransform) -> jax.Array:
        """Parameters of T^-1 for a rotation or identity ground-truth transform."""
        r_inv = np.asarray(transform.matrix).T
        c = np.asarray(self.spec.center)
        c_t = np.asarray(transform.center) if transform.kind != "identity" else c
        # T^-1(s) = c_t + R^T (s - c_t) = c + R^T (s - c) + (c_t - c) - R^T (c_t - c)
        offset = (c_t - c) - r_inv @ (c_t - c)
        if self.family == "linear" and not np.allclose(offset, 0.0, atol=1e-12):
            raise ValueError("The transform center differs from the grid center.")
        if self.family == "linear":
            return self.params_from_matrix(r_inv)
        return self.params_from_matrix(r_inv, offset)

    def apply(self, params_P: jax.Array, s_BD: jax.Array) -> jax.Array:
        s_BD = jnp.asarray(s_BD, dtype=jnp.float64)
        if self.family == "mlp":
            x_BD = normalize_coordinates(s_BD, self.spec.width, self.spec.height)
            return denormalize_coordinates(
                x_BD + self.net(params_P, x_BD), self.spec.width, self.spec.height
            )
        m_DD = params_P[:4].reshape(2, 2)
        out_BD = self.center_D + (s_BD - self.center_D) @ m_DD.T
        if self.family == "affine":
            out_BD = out_BD + params_P[4:6]
        return out_BD

    __call__ = apply

    def grad_params(self, params_P: jax.Array, s_D: jax.Array) -> jax.Array:
        """Jacobian of u(s) w.r.t. omega, shape (D, P)."""
        return jax.jacobian(self.apply, argnums=0)(params_P, jnp.asarray(s_D, jnp.float64))

    def grad_input(self, params_P: jax.Array, s_D: jax.Array) -> jax.Array:
        """Jacobian of u(s) w.r.t. s, shape (D, D)."""
        return jax.jacobian(self.apply, argnums=1)(params_P, jnp.asarray(s_D, jnp.float64))
