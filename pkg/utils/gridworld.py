"""Deterministic grid navigation MDP, state-space transforms and rollouts.

Dimension keys:
    B: batch size (episodes)
    H: horizon
    Hp1: H + 1
    D: coordinate dimension (2)
"""

from dataclasses import dataclass
import enum
import math
from typing import Any, Callable, Literal

from flax import struct
import jax
import jax.numpy as jnp
import numpy as np


class Action(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    UP = 2
    DOWN = 3


NUM_ACTIONS = len(Action)

# y grows downwards: the goal (7, 7) is the bottom-right corner.
_MOVES_AD = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.int64)


@dataclass(frozen=True)
class GridWorldSpec:
    width: int = 8
    height: int = 8
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] = (7, 7)
    horizon: int = 50
    step_reward: float = -1.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.horizon <= 0:
            raise ValueError(
                f"width, height and horizon must be positive, got "
                f"{self.width}, {self.height}, {self.horizon}."
            )
        if tuple(self.start) == tuple(self.goal):
            raise ValueError(f"start and goal coincide at {self.start}.")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not (0 <= cell[0] < self.width and 0 <= cell[1] < self.height):
                raise ValueError(f"{name} {cell} lies outside the grid.")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def cells(self) -> np.ndarray:
        """All grid cells in row-major order, shape (width * height, 2)."""
        xs, ys = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class StateTransform:
    kind: Literal["identity", "rotation"] = "identity"
    angle: float = 0.0
    center: tuple[float, float] = (3.5, 3.5)

    def __post_init__(self):
        if self.kind not in ("identity", "rotation"):
            raise ValueError(f"Unknown transform kind {self.kind!r}.")

    @classmethod
    def rotation(cls, angle: float, spec: GridWorldSpec) -> "StateTransform":
        """Rotation about the grid center, so the image shares the grid's bounding box."""
        return cls(kind="rotation", angle=float(angle), center=spec.center)

    @property
    def matrix(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(2)
        c, s = math.cos(self.angle), math.sin(self.angle)
        m = np.array([[c, -s], [s, c]])
        # Snap entries that are integers up to rounding so multiples of pi/2 are exact.
        snapped = np.round(m)
        return np.where(np.abs(m - snapped) < 1e-12, snapped, m)


def apply_transform(t: StateTransform, s_BD: jax.Array) -> jax.Array:
    s_BD = jnp.asarray(s_BD, dtype=jnp.float64)
    if t.kind == "identity":
        return s_BD
    center_D = jnp.asarray(t.center, dtype=jnp.float64)
    return center_D + (s_BD - center_D) @ jnp.asarray(t.matrix).T


def invert_transform(t: StateTransform) -> StateTransform:
    if t.kind == "identity":
        return t
    return StateTransform(kind="rotation", angle=-t.angle, center=t.center)


@struct.dataclass
class Trajectory:
    """One episode (or a batch of episodes along leading axes).

    states:  (..., Hp1, D) observed states; entries after termination repeat
             the final state.
    actions: (..., H) action indices; zero after termination.
    rewards: (..., H) rewards; zero after termination.
    length:  (...) number of steps L taken, 1 <= L <= H.
    reached_goal: (...) whether the episode ended at the goal.
    """

    states: jax.Array
    actions: jax.Array
    rewards: jax.Array
    length: jax.Array
    reached_goal: jax.Array

    @property
    def horizon(self) -> int:
        return self.actions.shape[-1]

    @property
    def step_mask(self) -> jax.Array:
        return jnp.arange(self.horizon) < self.length[..., None]

    @property
    def state_mask(self) -> jax.Array:
        return jnp.arange(self.horizon + 1) <= self.length[..., None]

    @property
    def returns(self) -> jax.Array:
        return self.rewards.sum(axis=-1)

    def unbatch(self) -> list["Trajectory"]:
        n = self.length.shape[0]
        return [jax.tree.map(lambda x: x[i], self) for i in range(n)]

    def to_lists(self) -> tuple[list, list, list]:
        """Trimmed (states, actions, rewards) of a single episode."""
        L = int(self.length)
        states = [tuple(float(c) for c in s) for s in np.asarray(self.states[: L + 1])]
        actions = [Action(int(a)) for a in np.asarray(self.actions[:L])]
        rewards = [float(r) for r in np.asarray(self.rewards[:L])]
        return states, actions, rewards


def _transition(
    spec: GridWorldSpec, pos_D: jax.Array, action: jax.Array
) -> tuple[jax.Array, jax.Array, jax.Array]:
    candidate_D = pos_D + jnp.asarray(_MOVES_AD)[action]
    inside = (
        (candidate_D[0] >= 0)
        & (candidate_D[0] < spec.width)
        & (candidate_D[1] >= 0)
        & (candidate_D[1] < spec.height)
    )
    next_D = jnp.where(inside, candidate_D, pos_D)
    done = jnp.all(next_D == jnp.asarray(spec.goal))
    return next_D, jnp.asarray(spec.step_reward, dtype=jnp.float64), done


def step(
    spec: GridWorldSpec, s: tuple[int, int], a: Action | int
) -> tuple[tuple[int, int], float, bool]:
    s_D = np.asarray(s, dtype=np.float64)
    if s_D.shape != (2,) or not np.all(s_D == np.round(s_D)):
        raise ValueError(
            f"step expects an integer source-domain cell, got {s}. "
            "Transformed states must not be fed to the untransformed environment."
        )
    if not (0 <= s_D[0] < spec.width and 0 <= s_D[1] < spec.height):
        raise ValueError(f"State {s} lies outside the {spec.width}x{spec.height} grid.")
    next_D, reward, done = _transition(
        spec, jnp.asarray(s_D, dtype=jnp.int64), jnp.asarray(int(a))
    )
    next_D = np.asarray(next_D)
    return (int(next_D[0]), int(next_D[1])), float(reward), bool(done)


# An actor maps (params, observed state, key) to an action index. It must be
# hashable since rollouts are compiled per actor.
ActFn = Callable[[Any, jax.Array, jax.Array], jax.Array]


def rollout(
    spec: GridWorldSpec,
    transform: StateTransform,
    act_fn: ActFn,
    act_params: Any,
    rng: jax.Array,
) -> Trajectory:
    """Runs one episode; the sampler only ever sees transformed states.

    The key for step t is fold_in(rng, t), so identical keys and samplers give
    identical trajectories regardless of batching.
    """
    start_D = jnp.asarray(spec.start, dtype=jnp.int64)

    def _step(carry, t):
        pos_D, done = carry
        obs_D = apply_transform(transform, pos_D)
        action = jnp.asarray(act_fn(act_params, obs_D, jax.random.fold_in(rng, t)))
        next_D, reward, reached = _transition(spec, pos_D, action)
        active = ~done
        pos_D = jnp.where(active, next_D, pos_D)
        outputs = (
            apply_transform(transform, pos_D),
            jnp.where(active, action, 0),
            jnp.where(active, reward, 0.0),
            active,
        )
        return (pos_D, done | reached), outputs

    (_, reached_goal), (obs_HD, actions_H, rewards_H, active_H) = jax.lax.scan(
        _step, (start_D, jnp.asarray(False)), jnp.arange(spec.horizon)
    )
    states_Hp1D = jnp.concatenate(
        [apply_transform(transform, start_D)[None], obs_HD], axis=0
    )
    return Trajectory(
        states=states_Hp1D,
        actions=actions_H.astype(jnp.int64),
        rewards=rewards_H,
        length=active_H.sum(),
        reached_goal=reached_goal,
    )


def episode_keys(rng: jax.Array, num_episodes: int) -> jax.Array:
    """Per-episode key stream: episode i uses fold_in(rng, i)."""
    return jax.vmap(lambda i: jax.random.fold_in(rng, i))(jnp.arange(num_episodes))


def _rollout_batch(spec, transform, act_fn, act_params, keys_B):
    return jax.vmap(lambda key: rollout(spec, transform, act_fn, act_params, key))(keys_B)


rollout_batch = jax.jit(_rollout_batch, static_argnums=(0, 1, 2))


STREAMS = {
    "source_training": 0,
    "rollouts": 1,
    "potentials": 2,
    "demos": 3,
    "evaluation": 4,
    "undo_init": 5,
}


def stream_key(seed: int, stream: str) -> jax.Array:
    """Named substream of the master seed: fold_in(key(seed), STREAMS[stream])."""
    return jax.random.fold_in(jax.random.key(seed), STREAMS[stream])
