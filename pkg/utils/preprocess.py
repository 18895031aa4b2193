import einops
import jax
import jax.numpy as jnp


def grid_extent(width: int, height: int) -> jax.Array:
    """Coordinate span per axis; degenerate axes of a single cell count as 1."""
    return jnp.array([max(width - 1, 1), max(height - 1, 1)], dtype=jnp.float64)


def normalize_coordinates(states_BD: jax.Array, width: int, height: int) -> jax.Array:
    """Maps grid coordinates onto [-1, 1] (off-grid reals extrapolate linearly)."""
    return 2.0 * states_BD / grid_extent(width, height) - 1.0


def denormalize_coordinates(states_BD: jax.Array, width: int, height: int) -> jax.Array:
    return 0.5 * (states_BD + 1.0) * grid_extent(width, height)


def flatten_sequence(states_TD: jax.Array) -> jax.Array:
    return einops.rearrange(states_TD, "t d -> (t d)")


def flatten_batch(states_BTD: jax.Array) -> jax.Array:
    return einops.rearrange(states_BTD, "b t d -> (b t) d")
