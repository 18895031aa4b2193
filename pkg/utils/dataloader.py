"""Trajectory files and demonstration sets.

A trajectory file is an ArrayRecord file of pickled records: record 0 is the
header, every further record holds one trimmed episode.

Dimension keys:
    B: number of episodes
    H: horizon
    Hp1: H + 1
    D: coordinate dimension
"""

from dataclasses import asdict, dataclass
import os
import pickle
from typing import Any

from array_record.python.array_record_module import ArrayRecordWriter
import grain
import jax
import jax.numpy as jnp
import numpy as np

from utils.gridworld import NUM_ACTIONS, GridWorldSpec, StateTransform, Trajectory

TRAJECTORY_FORMAT = "tvd-trajectories"
TRAJECTORY_FORMAT_VERSION = 1
_PICKLE_PROTOCOL = 4


def trajectory_header(
    spec: GridWorldSpec,
    transform: StateTransform,
    source: str,
    seed: int,
    num_trajectories: int,
) -> dict[str, Any]:
    return {
        "format": TRAJECTORY_FORMAT,
        "version": TRAJECTORY_FORMAT_VERSION,
        "grid": asdict(spec),
        "transform": asdict(transform),
        "source": source,
        "seed": int(seed),
        "num_trajectories": int(num_trajectories),
    }


def spec_from_header(header: dict) -> tuple[GridWorldSpec, StateTransform]:
    grid = dict(header["grid"])
    grid["start"] = tuple(grid["start"])
    grid["goal"] = tuple(grid["goal"])
    transform = dict(header["transform"])
    transform["center"] = tuple(transform["center"])
    return GridWorldSpec(**grid), StateTransform(**transform)


def write_trajectory_file(path: str, trajectories: Trajectory, header: dict) -> None:
    """Writes a batch of episodes, trimmed to their lengths."""
    num_trajectories = int(trajectories.length.shape[0])
    if header["num_trajectories"] != num_trajectories:
        raise ValueError(
            f"Header announces {header['num_trajectories']} trajectories, got {num_trajectories}."
        )
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    states_BHp1D = np.asarray(trajectories.states, dtype=np.float64)
    actions_BH = np.asarray(trajectories.actions, dtype=np.int64)
    rewards_BH = np.asarray(trajectories.rewards, dtype=np.float64)
    lengths_B = np.asarray(trajectories.length, dtype=np.int64)
    reached_B = np.asarray(trajectories.reached_goal, dtype=bool)

    writer = ArrayRecordWriter(str(path), "group_size:1")
    try:
        writer.write(pickle.dumps(header, protocol=_PICKLE_PROTOCOL))
        for b in range(num_trajectories):
            L = int(lengths_B[b])
            record = {
                "states": states_BHp1D[b, : L + 1].copy(),
                "actions": actions_BH[b, :L].copy(),
                "rewards": rewards_BH[b, :L].copy(),
                "reached_goal": bool(reached_B[b]),
            }
            writer.write(pickle.dumps(record, protocol=_PICKLE_PROTOCOL))
    finally:
        writer.close()


def pad_trajectory(
    states_LD: np.ndarray,
    actions_L: np.ndarray,
    rewards_L: np.ndarray,
    reached_goal: bool,
    horizon: int,
) -> Trajectory:
    """Pads a trimmed episode to the horizon, repeating the final state."""
    L = len(actions_L)
    if not 1 <= L <= horizon:
        raise ValueError(f"Episode length {L} outside [1, {horizon}].")
    if len(states_LD) != L + 1 or len(rewards_L) != L:
        raise ValueError(
            f"Inconsistent episode: {len(states_LD)} states, {L} actions, {len(rewards_L)} rewards."
        )
    if np.any((actions_L < 0) | (actions_L >= NUM_ACTIONS)):
        raise ValueError(f"Invalid action indices {actions_L}.")
    states_Hp1D = np.concatenate(
        [states_LD, np.repeat(states_LD[-1:], horizon + 1 - len(states_LD), axis=0)]
    )
    return Trajectory(
        states=jnp.asarray(states_Hp1D, dtype=jnp.float64),
        actions=jnp.asarray(np.pad(actions_L, (0, horizon - L)), dtype=jnp.int64),
        rewards=jnp.asarray(np.pad(rewards_L, (0, horizon - L)), dtype=jnp.float64),
        length=jnp.asarray(L, dtype=jnp.int64),
        reached_goal=jnp.asarray(reached_goal),
    )


def read_trajectory_file(path: str) -> tuple[dict, Trajectory]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Trajectory file {path} does not exist.")
    source = grain.sources.ArrayRecordDataSource([str(path)])
    header = pickle.loads(source[0])
    if header.get("format") != TRAJECTORY_FORMAT:
        raise ValueError(f"{path} is not a trajectory file.")
    if header.get("version") != TRAJECTORY_FORMAT_VERSION:
        raise ValueError(
            f"Unsupported trajectory file version {header.get('version')} in {path}."
        )
    spec, _ = spec_from_header(header)
    episodes = []
    for i in range(1, len(source)):
        record = pickle.loads(source[i])
        episodes.append(
            pad_trajectory(
                np.asarray(record["states"]),
                np.asarray(record["actions"]),
                np.asarray(record["rewards"]),
                record["reached_goal"],
                spec.horizon,
            )
        )
    if len(episodes) != header["num_trajectories"]:
        raise ValueError(
            f"{path} holds {len(episodes)} trajectories, header says {header['num_trajectories']}."
        )
    if not episodes:
        raise ValueError(f"{path} holds no trajectories.")
    return header, jax.tree.map(lambda *xs: jnp.stack(xs), *episodes)


@dataclass(frozen=True, eq=False)
class DemoSet:
    """Source-domain demonstrations, sampled with replacement."""

    trajectories: Trajectory
    spec: GridWorldSpec

    def __post_init__(self):
        if self.trajectories.length.shape[0] == 0:
            raise ValueError("A demonstration set needs at least one trajectory.")
        states_ND = np.asarray(self.trajectories.states).reshape(-1, 2)
        inside = (
            (states_ND[:, 0] >= 0)
            & (states_ND[:, 0] <= self.spec.width - 1)
            & (states_ND[:, 1] >= 0)
            & (states_ND[:, 1] <= self.spec.height - 1)
        )
        if not np.all(inside):
            raise ValueError("Demonstration states must lie inside the source grid.")

    def __len__(self) -> int:
        return int(self.trajectories.length.shape[0])

    def sample(self, key: jax.Array, batch_size: int) -> Trajectory:
        idx_B = jax.random.randint(key, (batch_size,), 0, len(self))
        return jax.tree.map(lambda x: x[idx_B], self.trajectories)

    @classmethod
    def from_file(cls, path: str) -> "DemoSet":
        header, trajectories = read_trajectory_file(path)
        spec, transform = spec_from_header(header)
        if transform.kind != "identity":
            raise ValueError(f"Demonstrations in {path} were not recorded in the source domain.")
        return cls(trajectories, spec)
