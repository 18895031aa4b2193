import flax.nnx as nnx
import jax

from utils.nn import Architecture, DifferentiableFunction


class DualPotentials:
    """Test-function pair (h, g) of the regularized Kantorovich dual.

    Dimension keys:
        N: number of samples
        F: feature dimension
    """

    def __init__(
        self,
        feature_dim: int,
        hidden_dims: tuple[int, ...],
        rngs: nnx.Rngs,
        activation: str = "tanh",
    ):
        self.feature_dim = feature_dim
        self.architecture = Architecture(feature_dim, tuple(hidden_dims), 1, activation)
        self.h_net = DifferentiableFunction(self.architecture, rngs)
        self.g_net = DifferentiableFunction(self.architecture, rngs)

    def init_params(self) -> dict:
        return {"h": self.h_net.init_params, "g": self.g_net.init_params}

    def h(self, params: dict, features_NF: jax.Array) -> jax.Array:
        return self.h_net(params["h"], features_NF)[..., 0]

    def g(self, params: dict, features_NF: jax.Array) -> jax.Array:
        return self.g_net(params["g"], features_NF)[..., 0]


class FPotential:
    """Single critic g = F(., xi) of a variational f-divergence."""

    def __init__(
        self,
        feature_dim: int,
        hidden_dims: tuple[int, ...],
        rngs: nnx.Rngs,
        activation: str = "tanh",
    ):
        self.feature_dim = feature_dim
        self.architecture = Architecture(feature_dim, tuple(hidden_dims), 1, activation)
        self.net = DifferentiableFunction(self.architecture, rngs)

    def init_params(self) -> jax.Array:
        return self.net.init_params

    def __call__(self, params: jax.Array, features_NF: jax.Array) -> jax.Array:
        return self.net(params, features_NF)[..., 0]

