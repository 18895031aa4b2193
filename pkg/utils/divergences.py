"""Distribution distances: the hinge-regularized Wasserstein dual and variational f-divergences.

Dimension keys:
    K: number of samples from the first distribution
    N: number of samples from the second distribution
    S: states per sample (H + 1 for trajectories, 1 for states)
    F: feature dimension
    D: coordinate dimension
"""

from dataclasses import dataclass, field
import logging
from typing import Literal

import einops
from flax import struct
import jax
import jax.numpy as jnp
import optax

from models.potentials import DualPotentials, FPotential
from utils.costs import CostSpec, aligned_cost, pairwise_costs
from utils.gridworld import GridWorldSpec, Trajectory
from utils.preprocess import flatten_batch, flatten_sequence, normalize_coordinates

logger = logging.getLogger(__name__)

F_DIVERGENCES = ("chi2", "tv", "kl")
KL_EXP_CLAMP = 20.0
TV_BOUND = 0.5
# The KL conjugate is e^y rather than e^(y - 1), so the variational optimum is
# KL - 1.
KL_CONJUGATE_OFFSET = 1.0


class DivergenceError(RuntimeError):
    """Raised when a parameter vector becomes non-finite."""

    def __init__(self, tensor: str, iteration: int | None = None):
        self.tensor = tensor
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"Non-finite values in {tensor}{where}.")


@dataclass(frozen=True)
class DivergenceSpec:
    kind: Literal["wasserstein", "chi2", "tv", "kl"] = "wasserstein"
    alpha: float = 10.0
    cost: CostSpec = field(default_factory=CostSpec)
    potential_lr: float = 1e-3
    inner_steps: int = 50
    batch_size: int = 32
    potential_optimizer: Literal["sgd", "adam"] = "sgd"
    hidden_dims: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.kind not in ("wasserstein", *F_DIVERGENCES):
            raise ValueError(f"Unknown divergence kind {self.kind!r}.")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}.")
        if self.potential_lr <= 0 or self.inner_steps <= 0 or self.batch_size <= 0:
            raise ValueError("potential_lr, inner_steps and batch_size must be positive.")


@struct.dataclass
class SampleBatch:
    """Weighted samples of one distribution, as seen by the potentials and the cost."""

    features_NF: jax.Array
    weights_N: jax.Array
    states_NSD: jax.Array
    lengths_N: jax.Array


@struct.dataclass
class DivergenceEstimate:
    value: jax.Array
    hinge_violation_rate: jax.Array


def feature_dim(spec: GridWorldSpec, cost: CostSpec) -> int:
    if cost.mode == "trajectory_dtw":
        return 2 * spec.horizon + 1
    return 2


def featurize(sample: Trajectory | jax.Array, spec: GridWorldSpec, cost: CostSpec) -> jax.Array:
    """Fixed-size encoding of a trajectory (DTW mode) or a state (state mode).

    Trajectories keep the L post-action states s_1..s_L padded to H by
    repeating s_L, flattened, plus the length fraction L / H.
    """
    if cost.mode == "state_l2":
        return normalize_coordinates(jnp.asarray(sample), spec.width, spec.height)
    return _featurize_trajectory(sample.states, sample.length, spec)


def _featurize_trajectory(states_Hp1D: jax.Array, length: jax.Array, spec: GridWorldSpec) -> jax.Array:
    H = states_Hp1D.shape[0] - 1
    padded_HD = jnp.where(
        (jnp.arange(1, H + 1) <= length)[:, None],
        states_Hp1D[1:],
        states_Hp1D[length],
    )
    coords = flatten_sequence(normalize_coordinates(padded_HD, spec.width, spec.height))
    return jnp.concatenate([coords, jnp.asarray([length / H], dtype=jnp.float64)])


def trajectory_samples(
    trajectories: Trajectory, spec: GridWorldSpec, cost: CostSpec
) -> SampleBatch:
    """Turns a batch of trajectories into weighted samples.

    DTW mode: one sample per trajectory, uniform weights. State mode: one
    sample per visited state, weighted 1 / (L + 1) within a trajectory and
    1 / B across trajectories (the empirical state-visitation distribution).
    Samples of trajectory b occupy a contiguous block of S entries.
    """
    states_BSD = trajectories.states
    B, S, _ = states_BSD.shape
    if cost.mode == "trajectory_dtw":
        features_BF = jax.vmap(_featurize_trajectory, in_axes=(0, 0, None))(
            states_BSD, trajectories.length, spec
        )
        return SampleBatch(
            features_NF=features_BF,
            weights_N=jnp.full((B,), 1.0 / B),
            states_NSD=states_BSD,
            lengths_N=trajectories.length + 1,
        )
    mask_BS = trajectories.state_mask
    weights_BS = mask_BS / (trajectories.length[:, None] + 1) / B
    states_ND = flatten_batch(states_BSD)
    return SampleBatch(
        features_NF=normalize_coordinates(states_ND, spec.width, spec.height),
        weights_N=einops.rearrange(weights_BS, "b s -> (b s)"),
        states_NSD=states_ND[:, None, :],
        lengths_N=jnp.ones((B * S,), dtype=jnp.int64),
    )


def point_samples(
    points_ND: jax.Array, weights_N: jax.Array, spec: GridWorldSpec
) -> SampleBatch:
    """Weighted point cloud in state mode (discrete distributions, oracle checks)."""
    points_ND = jnp.asarray(points_ND, jnp.float64)
    return SampleBatch(
        features_NF=normalize_coordinates(points_ND, spec.width, spec.height),
        weights_N=jnp.asarray(weights_N, jnp.float64),
        states_NSD=points_ND[:, None, :],
        lengths_N=jnp.ones((points_ND.shape[0],), dtype=jnp.int64),
    )


def pair_costs(batch1: SampleBatch, batch2: SampleBatch, cost: CostSpec) -> jax.Array:
    """Ground cost for every pair of the product batch, shape (K, N).

    DTW alignments are held fixed, so the result is differentiable in the
    states of either batch along the optimal warping path.
    """
    if cost.mode == "state_l2":
        return pairwise_costs(batch1.states_NSD[:, 0], batch2.states_NSD[:, 0])

    def row(t1_SD, len1):
        return jax.vmap(aligned_cost, in_axes=(None, 0, None, 0))(
            t1_SD, batch2.states_NSD, len1, batch2.lengths_N
        )

    return jax.vmap(row)(batch1.states_NSD, batch1.lengths_N)


def _hinge_terms(h_K, g_N, cost_KN):
    return jax.nn.relu(h_K[:, None] + g_N[None, :] - cost_KN)


def wasserstein_objective(
    batch1: SampleBatch,
    batch2: SampleBatch,
    potentials: DualPotentials,
    params: dict,
    spec: DivergenceSpec,
    cost_KN: jax.Array | None = None,
) -> jax.Array:
    """E_1[h] + E_2[g] - alpha * E_{1 x 2}[(h + g - c)_+] over the full cross product."""
    if cost_KN is None:
        cost_KN = pair_costs(batch1, batch2, spec.cost)
    h_K = potentials.h(params, batch1.features_NF)
    g_N = potentials.g(params, batch2.features_NF)
    hinge_KN = _hinge_terms(h_K, g_N, cost_KN)
    return (
        batch1.weights_N @ h_K
        + batch2.weights_N @ g_N
        - spec.alpha * (batch1.weights_N @ hinge_KN @ batch2.weights_N)
    )


def wasserstein_estimate(
    batch1: SampleBatch,
    batch2: SampleBatch,
    potentials: DualPotentials,
    params: dict,
    spec: DivergenceSpec,
    cost_KN: jax.Array | None = None,
) -> DivergenceEstimate:
    if cost_KN is None:
        cost_KN = pair_costs(batch1, batch2, spec.cost)
    h_K = potentials.h(params, batch1.features_NF)
    g_N = potentials.g(params, batch2.features_NF)
    violated_KN = (h_K[:, None] + g_N[None, :] - cost_KN) > 0
    return DivergenceEstimate(
        value=wasserstein_objective(batch1, batch2, potentials, params, spec, cost_KN),
        hinge_violation_rate=batch1.weights_N @ violated_KN.astype(jnp.float64) @ batch2.weights_N,
    )


def wasserstein_ascent_direction(
    batch1: SampleBatch,
    batch2: SampleBatch,
    potentials: DualPotentials,
    params: dict,
    spec: DivergenceSpec,
    cost_KN: jax.Array,
) -> dict:
    """Stochastic ascent direction on (xi_1, xi_2) with hinge subgradient 1[arg > 0]."""
    h_K, h_vjp = jax.vjp(lambda p: potentials.h_net(p, batch1.features_NF)[:, 0], params["h"])
    g_N, g_vjp = jax.vjp(lambda p: potentials.g_net(p, batch2.features_NF)[:, 0], params["g"])
    active_KN = ((h_K[:, None] + g_N[None, :] - cost_KN) > 0).astype(jnp.float64)
    coef_h_K = batch1.weights_N * (1.0 - spec.alpha * (active_KN @ batch2.weights_N))
    coef_g_N = batch2.weights_N * (1.0 - spec.alpha * (batch1.weights_N @ active_KN))
    return {"h": h_vjp(coef_h_K)[0], "g": g_vjp(coef_g_N)[0]}


def make_potential_optimizer(spec: DivergenceSpec) -> optax.GradientTransformation:
    if spec.potential_optimizer == "adam":
        return optax.adam(spec.potential_lr)
    return optax.sgd(spec.potential_lr)


def _ascend(params, opt_state, direction_fn, tx, steps):
    def body(carry, _):
        params, opt_state = carry
        # optax minimizes, so feed the negated ascent direction.
        grads = jax.tree.map(jnp.negative, direction_fn(params))
        updates, opt_state = tx.update(grads, opt_state, params)
        return (optax.apply_updates(params, updates), opt_state), None

    (params, opt_state), _ = jax.lax.scan(body, (params, opt_state), None, length=steps)
    return params, opt_state


def check_finite(tree, name: str, iteration: int | None = None):
    """Raises DivergenceError on the first non-finite leaf; traced leaves are left to the caller."""
    for path, leaf in jax.tree_util.tree_leaves_with_path(tree):
        if isinstance(leaf, jax.core.Tracer):
            continue
        if not bool(jnp.all(jnp.isfinite(leaf))):
            raise DivergenceError(f"{name}{jax.tree_util.keystr(path)}", iteration)


def update_potentials(
    batch1: SampleBatch,
    batch2: SampleBatch,
    potentials: DualPotentials,
    params: dict,
    spec: DivergenceSpec,
    opt_state=None,
    cost_KN: jax.Array | None = None,
) -> tuple[dict, optax.OptState]:
    """inner_steps ascent steps on a frozen batch pair; the cost is computed once."""
    if cost_KN is None:
        cost_KN = pair_costs(batch1, batch2, spec.cost)
    tx = make_potential_optimizer(spec)
    if opt_state is None:
        opt_state = tx.init(params)
    direction_fn = lambda p: wasserstein_ascent_direction(
        batch1, batch2, potentials, p, spec, cost_KN
    )
    params, opt_state = _ascend(params, opt_state, direction_fn, tx, spec.inner_steps)
    check_finite(params, "potentials")
    return params, opt_state


def potential_output(kind: str, raw_N: jax.Array) -> jax.Array:
    """Applies the TV constraint |g| <= 1/2 as a clamp; other kinds pass through."""
    if kind == "tv":
        return jnp.clip(raw_N, -TV_BOUND, TV_BOUND)
    return raw_N


def conjugate(kind: str, g_N: jax.Array) -> jax.Array:
    """f* as used by the variational objective: chi2 g + g^2/4, TV g, KL e^g."""
    if kind == "chi2":
        return g_N + 0.25 * jnp.square(g_N)
    if kind == "tv":
        return g_N
    if kind == "kl":
        return jnp.exp(jnp.minimum(g_N, KL_EXP_CLAMP))
    raise ValueError(f"{kind!r} is not an f-divergence, use one of {F_DIVERGENCES}")


def conjugate_slope(kind: str, g_N: jax.Array) -> jax.Array:
    """d f*(F) / dF: chi2 1 + F/2, TV 1, KL e^F."""
    if kind == "chi2":
        return 1.0 + 0.5 * g_N
    if kind == "tv":
        return jnp.ones_like(g_N)
    if kind == "kl":
        return jnp.where(g_N <= KL_EXP_CLAMP, jnp.exp(jnp.minimum(g_N, KL_EXP_CLAMP)), 0.0)
    raise ValueError(f"{kind!r} is not an f-divergence, use one of {F_DIVERGENCES}")


def f_div_objective(
    batch1: SampleBatch,
    batch2: SampleBatch,
    potential: FPotential,
    params: jax.Array,
    kind: str,
) -> jax.Array:
    """E_1[g] - E_2[f*(g)]; for KL add KL_CONJUGATE_OFFSET to read off the divergence."""
    g1_K = potential_output(kind, potential(params, batch1.features_NF))
    g2_N = potential_output(kind, potential(params, batch2.features_NF))
    return batch1.weights_N @ g1_K - batch2.weights_N @ conjugate(kind, g2_N)


def f_potential_ascent_direction(
    batch1: SampleBatch,
    batch2: SampleBatch,
    potential: FPotential,
    params: jax.Array,
    kind: str,
) -> jax.Array:
    """grad F(x1) - f*'(F(x2)) grad F(x2), averaged with the sample weights."""
    g1_K, vjp1 = jax.vjp(lambda p: potential_output(kind, potential(p, batch1.features_NF)), params)
    g2_N, vjp2 = jax.vjp(lambda p: potential_output(kind, potential(p, batch2.features_NF)), params)
    return vjp1(batch1.weights_N)[0] - vjp2(batch2.weights_N * conjugate_slope(kind, g2_N))[0]


def update_f_potential(
    batch1: SampleBatch,
    batch2: SampleBatch,
    potential: FPotential,
    params: jax.Array,
    kind: str,
    lr: float,
    steps: int = 1,
    optimizer: str = "sgd",
    opt_state=None,
) -> tuple[jax.Array, optax.OptState]:
    if kind not in F_DIVERGENCES:
        raise ValueError(f"{kind!r} is not an f-divergence, use one of {F_DIVERGENCES}")
    tx = optax.adam(lr) if optimizer == "adam" else optax.sgd(lr)
    if opt_state is None:
        opt_state = tx.init(params)
    direction_fn = lambda p: f_potential_ascent_direction(batch1, batch2, potential, p, kind)
    params, opt_state = _ascend(params, opt_state, direction_fn, tx, steps)
    check_finite(params, "potential")
    return params, opt_state
