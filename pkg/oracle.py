"""Exact reference solvers on small instances; every subcommand prints a JSON report."""

from dataclasses import dataclass, field
import json
import logging
import sys
from typing import Literal

import numpy as np
import tyro

from utils.config import ConfigError, run_cli
from utils.gridworld import GridWorldSpec, StateTransform
from utils.oracles import (
    bfs_distances,
    dtw_brute,
    enumerate_action_sequences,
    exact_ot,
    fdiv_exact,
    toy_corridor_spec,
    trajectories_from_actions,
)

logger = logging.getLogger(__name__)


def _pairs(name: str, values: list[float]) -> np.ndarray:
    if len(values) == 0 or len(values) % 2:
        raise ConfigError(f"--{name} needs a nonempty list of x y pairs, got {len(values)} numbers.")
    return np.asarray(values, dtype=np.float64).reshape(-1, 2)


def _weights(name: str, values: list[float], n: int) -> np.ndarray:
    if not values:
        return np.full((n,), 1.0 / n)
    if len(values) != n:
        raise ConfigError(f"--{name} has {len(values)} entries for {n} points.")
    return np.asarray(values, dtype=np.float64)


@dataclass
class OtLp:
    """Exact earth mover's distance between two weighted point sets (x y pairs)."""

    points1: list[float] = field(default_factory=list)
    points2: list[float] = field(default_factory=list)
    # Uniform when empty
    weights1: list[float] = field(default_factory=list)
    weights2: list[float] = field(default_factory=list)

    def run(self) -> dict:
        p1, p2 = _pairs("points1", self.points1), _pairs("points2", self.points2)
        w1 = _weights("weights1", self.weights1, len(p1))
        w2 = _weights("weights2", self.weights2, len(p2))
        return {"tool": "ot-lp", "distance": exact_ot(p1, w1, p2, w2)}


@dataclass
class DtwBrute:
    """Minimum summed cost over every warping path of two sequences (x y pairs)."""

    seq1: list[float] = field(default_factory=list)
    seq2: list[float] = field(default_factory=list)

    def run(self) -> dict:
        return {"tool": "dtw-brute", "cost": dtw_brute(_pairs("seq1", self.seq1), _pairs("seq2", self.seq2))}


@dataclass
class Bfs:
    """Shortest path length from start to goal and the full distance table."""

    grid: GridWorldSpec = field(default_factory=GridWorldSpec)

    def run(self) -> dict:
        dist_XY = bfs_distances(self.grid)
        return {
            "tool": "bfs",
            "length": int(dist_XY[self.grid.start[0], self.grid.start[1]]),
            "distances": dist_XY.T.tolist(),
        }


@dataclass
class FdivExact:
    """Closed-form f-divergence D_f(p || q) of two distributions on a shared support."""

    p: list[float] = field(default_factory=list)
    q: list[float] = field(default_factory=list)
    kind: Literal["chi2", "tv", "kl"] = "chi2"

    def run(self) -> dict:
        if not self.p or len(self.p) != len(self.q):
            raise ConfigError("--p and --q must be nonempty and of equal length.")
        for name, values in (("p", self.p), ("q", self.q)):
            if min(values) < 0 or not np.isclose(sum(values), 1.0):
                raise ConfigError(f"--{name} must be a probability vector.")
        value = fdiv_exact(self.p, self.q, self.kind)
        return {"tool": "fdiv-exact", "kind": self.kind, "value": value if np.isfinite(value) else "inf"}


@dataclass
class EnumMdp:
    """Every trajectory of the two-cell corridor (or a given small grid)."""

    grid: GridWorldSpec = field(default_factory=toy_corridor_spec)

    def run(self) -> dict:
        sequences = enumerate_action_sequences(self.grid)
        batch = trajectories_from_actions(self.grid, StateTransform(center=self.grid.center), sequences)
        returns = np.asarray(batch.returns)
        reached = np.asarray(batch.reached_goal)
        return {
            "tool": "enum-mdp",
            "num_trajectories": len(sequences),
            "trajectories": [
                {"actions": list(actions), "return": float(r), "reached_goal": bool(g)}
                for actions, r, g in zip(sequences, returns, reached)
            ],
        }


SUBCOMMANDS = {
    "ot-lp": OtLp,
    "dtw-brute": DtwBrute,
    "bfs": Bfs,
    "fdiv-exact": FdivExact,
    "enum-mdp": EnumMdp,
}


def main(tool) -> None:
    json.dump(tool.run(), sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    run_cli(lambda: main(tyro.extras.subcommand_cli_from_dict(SUBCOMMANDS)))
