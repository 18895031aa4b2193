from dataclasses import dataclass, asdict

from flax import nnx
import jax
import jax.numpy as jnp
from jax.flatten_util import ravel_pytree


_ACTIVATIONS = {
    "tanh": jnp.tanh,
    "relu": jax.nn.relu,
    "gelu": jax.nn.gelu,
}


@dataclass(frozen=True)
class Architecture:
    in_dim: int
    hidden_dims: tuple[int, ...]
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"Unsupported activation {self.activation!r}. "
                f"Please use one of {sorted(_ACTIVATIONS)}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Architecture":
        return cls(
            in_dim=int(data["in_dim"]),
            hidden_dims=tuple(int(d) for d in data["hidden_dims"]),
            out_dim=int(data["out_dim"]),
            activation=str(data["activation"]),
        )


class MLP(nnx.Module):
    """
    Dimension keys:
        B: batch size (any number of leading axes)
        I: number of input features
        M: hidden width
        O: number of output features
    """

    def __init__(
        self,
        architecture: Architecture,
        zero_init_output: bool,
        param_dtype: jnp.dtype,
        rngs: nnx.Rngs,
    ):
        self.architecture = architecture
        self.zero_init_output = zero_init_output
        self.param_dtype = param_dtype

        dims = (architecture.in_dim, *architecture.hidden_dims)
        self.hidden = []
        for in_features, out_features in zip(dims[:-1], dims[1:]):
            self.hidden.append(
                nnx.Linear(
                    in_features=in_features,
                    out_features=out_features,
                    param_dtype=self.param_dtype,
                    rngs=rngs,
                )
            )
        output_kwargs = {}
        if self.zero_init_output:
            output_kwargs["kernel_init"] = nnx.initializers.zeros_init()
        self.output_dense = nnx.Linear(
            in_features=dims[-1],
            out_features=architecture.out_dim,
            param_dtype=self.param_dtype,
            rngs=rngs,
            **output_kwargs,
        )

    def __call__(self, x_BI: jax.Array) -> jax.Array:
        activation = _ACTIVATIONS[self.architecture.activation]
        x_BM = x_BI
        for layer in self.hidden:
            x_BM = activation(layer(x_BM))
        return self.output_dense(x_BM)


class DifferentiableFunction:
    """Parametric map with a flat parameter vector.

    The nnx module only provides structure and initialization; evaluation is
    functional in the flat vector, so parameters can be differentiated,
    checkpointed and optimized as a single array.
    """

    def __init__(
        self,
        architecture: Architecture,
        rngs: nnx.Rngs,
        zero_init_output: bool = False,
        param_dtype: jnp.dtype = jnp.float64,
    ):
        self.architecture = architecture
        module = MLP(architecture, zero_init_output, param_dtype, rngs=rngs)
        self.graphdef, state = nnx.split(module)
        self.init_params, self._unravel = ravel_pytree(state)

    @property
    def num_params(self) -> int:
        return int(self.init_params.size)

    def module(self, params_P: jax.Array) -> MLP:
        """The nnx module carrying `params_P`; edit it and `flatten` it back."""
        return nnx.merge(self.graphdef, self._unravel(params_P))

    def flatten(self, module: MLP) -> jax.Array:
        _, state = nnx.split(module)
        params_P, _ = ravel_pytree(state)
        return params_P

    def __call__(self, params_P: jax.Array, x_BI: jax.Array) -> jax.Array:
        return self.module(params_P)(x_BI)

    forward = __call__

    def grad_params(self, params_P: jax.Array, x_I: jax.Array) -> jax.Array:
        """Jacobian of the output w.r.t. the flat parameters, shape (O, P)."""
        return jax.jacobian(lambda p: self(p, x_I))(params_P)

    def grad_input(self, params_P: jax.Array, x_I: jax.Array) -> jax.Array:
        """Jacobian of the output w.r.t. the input, shape (O, I)."""
        return jax.jacobian(lambda x: self(params_P, x))(x_I)

    def constant_params(self, value: float) -> jax.Array:
        """Parameters for which the function outputs `value` everywhere."""
        module = self.module(jnp.zeros_like(self.init_params))
        module.output_dense.bias.value = jnp.full(
            (self.architecture.out_dim,), value, dtype=self.init_params.dtype
        )
        return self.flatten(module)
