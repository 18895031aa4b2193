"""Ground costs: Euclidean state cost and dynamic time warping over state sequences.

Dimension keys:
    N: length of the first sequence
    M: length of the second sequence
    D: coordinate dimension
"""

from dataclasses import dataclass
from typing import Literal

from flax import struct
import jax
import jax.numpy as jnp
import numpy as np


@dataclass(frozen=True)
class CostSpec:
    mode: Literal["trajectory_dtw", "state_l2"] = "trajectory_dtw"

    def __post_init__(self):
        if self.mode not in ("trajectory_dtw", "state_l2"):
            raise ValueError(f"Unknown cost mode {self.mode!r}.")


def _safe_norm(x_BD: jax.Array) -> jax.Array:
    # The gradient of the norm at 0 is taken to be 0.
    sq_B = jnp.sum(jnp.square(x_BD), axis=-1)
    nonzero_B = sq_B > 0
    return jnp.where(nonzero_B, jnp.sqrt(jnp.where(nonzero_B, sq_B, 1.0)), 0.0)


def state_cost(s1_D: jax.Array, s2_D: jax.Array) -> jax.Array:
    return _safe_norm(jnp.asarray(s1_D, jnp.float64) - jnp.asarray(s2_D, jnp.float64))


def pairwise_costs(t1_ND: jax.Array, t2_MD: jax.Array) -> jax.Array:
    t1_ND = jnp.asarray(t1_ND, jnp.float64)
    t2_MD = jnp.asarray(t2_MD, jnp.float64)
    return _safe_norm(t1_ND[:, None, :] - t2_MD[None, :, :])


@struct.dataclass
class DtwResult:
    distance: jax.Array
    alignment_NM: jax.Array

    def path(self) -> list[tuple[int, int]]:
        """The warping path as ordered index pairs from (0, 0) to the end."""
        rows, cols = np.nonzero(np.asarray(self.alignment_NM))
        return sorted(zip(rows.tolist(), cols.tolist()))


def _accumulate(cost_NM: jax.Array) -> jax.Array:
    """D[i, j] = cost[i, j] + min(D[i-1, j-1], D[i-1, j], D[i, j-1])."""
    M = cost_NM.shape[1]
    init_row_Mp1 = jnp.full((M + 1,), jnp.inf).at[0].set(0.0)

    def row_step(prev_row_Mp1, cost_row_M):
        def cell_step(left, inputs):
            cost, diag, up = inputs
            value = cost + jnp.minimum(jnp.minimum(diag, up), left)
            return value, value

        _, row_M = jax.lax.scan(
            cell_step, jnp.inf, (cost_row_M, prev_row_Mp1[:-1], prev_row_Mp1[1:])
        )
        return jnp.concatenate([jnp.array([jnp.inf]), row_M]), row_M

    _, acc_NM = jax.lax.scan(row_step, init_row_Mp1, cost_NM)
    return acc_NM


def _backtrack(acc_NM: jax.Array, end_i: jax.Array, end_j: jax.Array) -> jax.Array:
    # Ties prefer the diagonal, then (i-1, j), then (i, j-1).
    N, M = acc_NM.shape
    step_i = jnp.array([1, 1, 0])
    step_j = jnp.array([1, 0, 1])

    def body(carry, _):
        i, j, active, align_NM = carry
        align_NM = align_NM.at[i, j].add(jnp.where(active, 1.0, 0.0))
        diag = jnp.where((i > 0) & (j > 0), acc_NM[jnp.maximum(i - 1, 0), jnp.maximum(j - 1, 0)], jnp.inf)
        up = jnp.where(i > 0, acc_NM[jnp.maximum(i - 1, 0), j], jnp.inf)
        left = jnp.where(j > 0, acc_NM[i, jnp.maximum(j - 1, 0)], jnp.inf)
        choice = jnp.argmin(jnp.stack([diag, up, left]))
        active = active & ~((i == 0) & (j == 0))
        i = jnp.where(active, i - step_i[choice], i)
        j = jnp.where(active, j - step_j[choice], j)
        return (i, j, active, align_NM), None

    init = (end_i, end_j, jnp.asarray(True), jnp.zeros((N, M)))
    (_, _, _, align_NM), _ = jax.lax.scan(body, init, None, length=N + M - 1)
    return align_NM


def _dtw(t1_ND, t2_MD, len1, len2) -> DtwResult:
    cost_NM = pairwise_costs(t1_ND, t2_MD)
    acc_NM = _accumulate(cost_NM)
    return DtwResult(
        distance=acc_NM[len1 - 1, len2 - 1],
        alignment_NM=_backtrack(acc_NM, len1 - 1, len2 - 1),
    )


_dtw_jit = jax.jit(_dtw)


def dtw(
    t1_ND: jax.Array,
    t2_MD: jax.Array,
    len1: int | jax.Array | None = None,
    len2: int | jax.Array | None = None,
) -> DtwResult:
    """DTW with Euclidean base cost over the first len1 / len2 entries.

    Entries past the given lengths (padding) never influence the result.
    """
    t1_ND = jnp.asarray(t1_ND, jnp.float64)
    t2_MD = jnp.asarray(t2_MD, jnp.float64)
    if t1_ND.shape[0] == 0 or t2_MD.shape[0] == 0:
        raise ValueError("dtw requires two nonempty sequences.")
    len1 = t1_ND.shape[0] if len1 is None else len1
    len2 = t2_MD.shape[0] if len2 is None else len2
    return _dtw_jit(t1_ND, t2_MD, jnp.asarray(len1), jnp.asarray(len2))


def aligned_cost(t1_ND, t2_MD, len1, len2) -> jax.Array:
    """DTW value with the optimal alignment held fixed.

    Equal to the DTW distance, but differentiable in both sequences with the
    alignment treated as a constant.
    """
    result = _dtw(jax.lax.stop_gradient(t1_ND), jax.lax.stop_gradient(t2_MD), len1, len2)
    align_NM = jax.lax.stop_gradient(result.alignment_NM)
    return jnp.sum(align_NM * pairwise_costs(t1_ND, t2_MD))


def dtw_subgradient(t1_ND: jax.Array, t2_MD: jax.Array) -> jax.Array:
    """Gradient of the DTW distance w.r.t. each state of t2, shape (M, D)."""
    t1_ND = jnp.asarray(t1_ND, jnp.float64)
    t2_MD = jnp.asarray(t2_MD, jnp.float64)
    if t1_ND.shape[0] == 0 or t2_MD.shape[0] == 0:
        raise ValueError("dtw_subgradient requires two nonempty sequences.")
    return jax.grad(aligned_cost, argnums=1)(
        t1_ND, t2_MD, t1_ND.shape[0], t2_MD.shape[0]
    )
