from dataclasses import dataclass
from typing import Any

import flax.nnx as nnx
import jax
import jax.numpy as jnp
import numpy as np

from models.undo_map import UndoMap
from utils.gridworld import (
    NUM_ACTIONS,
    Action,
    GridWorldSpec,
    StateTransform,
    Trajectory,
    episode_keys,
    rollout_batch,
)
from utils.nn import Architecture, DifferentiableFunction
from utils.preprocess import normalize_coordinates


class Policy:
    """Softmax policy over the four grid actions, fed normalized coordinates.

    Accepts any real coordinates, so it composes with undo maps that produce
    off-lattice states.

    Dimension keys:
        B: batch size
        D: coordinate dimension
        A: number of actions
    """

    def __init__(
        self,
        spec: GridWorldSpec,
        rngs: nnx.Rngs,
        hidden_dims: tuple[int, ...] = (32, 32),
        activation: str = "tanh",
    ):
        self.spec = spec
        self.architecture = Architecture(2, tuple(hidden_dims), NUM_ACTIONS, activation)
        self.net = DifferentiableFunction(self.architecture, rngs, zero_init_output=True)

    @property
    def init_params(self) -> jax.Array:
        return self.net.init_params

    def logits(self, theta: jax.Array, s_BD: jax.Array) -> jax.Array:
        x_BD = normalize_coordinates(
            jnp.asarray(s_BD, jnp.float64), self.spec.width, self.spec.height
        )
        return self.net(theta, x_BD)

    def action_distribution(self, theta: jax.Array, s_BD: jax.Array) -> jax.Array:
        return jax.nn.softmax(self.logits(theta, s_BD), axis=-1)

    def log_prob(self, theta: jax.Array, s_D: jax.Array, a: jax.Array) -> jax.Array:
        return jax.nn.log_softmax(self.logits(theta, s_D), axis=-1)[a]

    def log_prob_grad(
        self, theta: jax.Array, s_D: jax.Array, a: Action | int
    ) -> tuple[jax.Array, jax.Array]:
        """Gradient of log pi(a|s) w.r.t. theta and w.r.t. the state."""
        return jax.grad(self.log_prob, argnums=(0, 1))(
            theta, jnp.asarray(s_D, jnp.float64), int(a)
        )

    def entropy(self, theta: jax.Array, s_BD: jax.Array) -> jax.Array:
        log_p_BA = jax.nn.log_softmax(self.logits(theta, s_BD), axis=-1)
        return -jnp.sum(jnp.exp(log_p_BA) * log_p_BA, axis=-1)


@dataclass(frozen=True)
class PolicyActor:
    """Samples a ~ pi_theta(.|u_omega(s)); without an undo map, a ~ pi_theta(.|s).

    Params: {"theta": ..., "omega": ...} ("omega" ignored without an undo map).
    """

    policy: Policy
    undo_map: UndoMap | None = None
    greedy: bool = False

    def fed_state(self, params: dict, obs_D: jax.Array) -> jax.Array:
        if self.undo_map is None:
            return obs_D
        return self.undo_map.apply(params["omega"], obs_D)

    def __call__(self, params: dict, obs_D: jax.Array, key: jax.Array) -> jax.Array:
        logits_A = self.policy.logits(params["theta"], self.fed_state(params, obs_D))
        if self.greedy:
            return jnp.argmax(logits_A)
        return jax.random.categorical(key, logits_A)

    def entropy(self, params: dict, obs_BD: jax.Array) -> jax.Array:
        return self.policy.entropy(params["theta"], self.fed_state(params, obs_BD))


@dataclass(frozen=True)
class EdgeFollowingExpert:
    """Deterministic expert: along the top edge to the last column, then down it."""

    spec: GridWorldSpec

    def __call__(self, params: Any, obs_D: jax.Array, key: jax.Array) -> jax.Array:
        at_last_column = jnp.round(obs_D[0]) >= self.spec.width - 1
        return jnp.where(at_last_column, int(Action.DOWN), int(Action.RIGHT))

    def entropy(self, params: Any, obs_BD: jax.Array) -> jax.Array:
        return jnp.zeros(obs_BD.shape[:-1])


class ShortestPathExpert:
    """Deterministic expert following a BFS distance table (ties: Left, Right, Up, Down order)."""

    def __init__(self, spec: GridWorldSpec):
        from utils.oracles import bfs_distances

        self.spec = spec
        self.distances_WH = jnp.asarray(bfs_distances(spec))
        moves = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])
        self._moves_AD = jnp.asarray(moves)

    def __call__(self, params: Any, obs_D: jax.Array, key: jax.Array) -> jax.Array:
        cell_D = jnp.round(obs_D).astype(jnp.int64)
        candidates_AD = cell_D + self._moves_AD
        inside_A = (
            (candidates_AD[:, 0] >= 0)
            & (candidates_AD[:, 0] < self.spec.width)
            & (candidates_AD[:, 1] >= 0)
            & (candidates_AD[:, 1] < self.spec.height)
        )
        clipped_AD = jnp.clip(candidates_AD, 0, jnp.array([self.spec.width - 1, self.spec.height - 1]))
        dist_A = jnp.where(inside_A, self.distances_WH[clipped_AD[:, 0], clipped_AD[:, 1]], jnp.inf)
        return jnp.argmin(dist_A)

    def entropy(self, params: Any, obs_BD: jax.Array) -> jax.Array:
        return jnp.zeros(obs_BD.shape[:-1])


@dataclass(frozen=True)
class PolicyEvaluation:
    goal_rate: float
    mean_return: float
    mean_entropy: float


def visited_entropy(actor, params, trajectories: Trajectory) -> jax.Array:
    """Mean policy entropy over the states where an action was taken."""
    entropy_BH = jax.vmap(lambda s: actor.entropy(params, s))(trajectories.states[:, :-1])
    mask_BH = trajectories.step_mask
    return jnp.sum(entropy_BH * mask_BH) / jnp.maximum(jnp.sum(mask_BH), 1)


def evaluate_actor(
    spec: GridWorldSpec,
    transform: StateTransform,
    actor,
    params: Any,
    episodes: int,
    rng: jax.Array,
) -> tuple[PolicyEvaluation, Trajectory]:
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}.")
    trajectories = rollout_batch(spec, transform, actor, params, episode_keys(rng, episodes))
    evaluation = PolicyEvaluation(
        goal_rate=float(jnp.mean(trajectories.reached_goal)),
        mean_return=float(jnp.mean(trajectories.returns)),
        mean_entropy=float(visited_entropy(actor, params, trajectories)),
    )
    return evaluation, trajectories


def evaluate_policy(
    spec: GridWorldSpec,
    transform: StateTransform,
    policy: Policy,
    theta: jax.Array,
    undo_map: UndoMap | None = None,
    omega: jax.Array | None = None,
    episodes: int = 200,
    seed: int = 0,
) -> PolicyEvaluation:
    """Monte-Carlo goal rate, return and visited-state entropy over seeded rollouts."""
    actor = PolicyActor(policy, undo_map)
    params = {"theta": theta, "omega": omega}
    evaluation, _ = evaluate_actor(
        spec, transform, actor, params, episodes, jax.random.key(seed)
    )
    return evaluation
