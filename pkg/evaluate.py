from dataclasses import dataclass, field, asdict
import logging
import sys
from typing import Literal

import jax
import yaml

from models.policy import EdgeFollowingExpert, PolicyActor, ShortestPathExpert, evaluate_actor
from utils.checkpoint import load_policy, load_undo_map
from utils.config import ConfigError, ExperimentConfig, parse_args, run_cli
from utils.gridworld import StateTransform, stream_key

logger = logging.getLogger(__name__)


@dataclass
class Args:
    config: str | None = None
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    # Policy checkpoint, or a built-in expert
    policy: str = ""
    expert: Literal["none", "edge", "shortest"] = "none"
    # Optional undo map checkpoint composed in front of the policy
    undo_map: str = ""
    # Evaluate in the source domain instead of the configured transform
    source_domain: bool = False
    greedy: bool = False
    episodes: int = 200


def build_actor(args: Args, exp: ExperimentConfig):
    if (args.policy == "") == (args.expert == "none"):
        raise ConfigError("Pass exactly one of --policy or --expert.")
    if args.expert != "none":
        if args.undo_map:
            raise ConfigError("--undo-map composes with a policy checkpoint, not an expert.")
        expert = EdgeFollowingExpert(exp.gridworld) if args.expert == "edge" else ShortestPathExpert(exp.gridworld)
        return expert, None

    policy, theta, _ = load_policy(args.policy)
    if policy.spec != exp.gridworld:
        raise ConfigError(f"{args.policy} was trained on {policy.spec}, the config describes {exp.gridworld}.")
    params = {"theta": theta}
    undo_map = None
    if args.undo_map:
        undo_map, omega, _ = load_undo_map(args.undo_map)
        if undo_map.spec != exp.gridworld:
            raise ConfigError(f"{args.undo_map} was learned on {undo_map.spec}, the config describes {exp.gridworld}.")
        params["omega"] = omega
    return PolicyActor(policy, undo_map, greedy=args.greedy), params


def main(args: Args) -> None:
    if args.episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {args.episodes}.")
    exp = args.experiment
    actor, params = build_actor(args, exp)
    transform = exp.state_transform
    if args.source_domain:
        transform = StateTransform(center=exp.gridworld.center)
    evaluation, _ = evaluate_actor(
        exp.gridworld,
        transform,
        actor,
        params,
        args.episodes,
        jax.random.fold_in(stream_key(exp.seed, "evaluation"), 0),
    )
    report = {
        "policy": args.policy or f"expert:{args.expert}",
        "undo_map": args.undo_map or None,
        "transform": {"kind": transform.kind, "angle": transform.angle},
        "episodes": args.episodes,
        "seed": exp.seed,
        **asdict(evaluation),
    }
    yaml.safe_dump(report, sys.stdout, sort_keys=False)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    run_cli(lambda: main(parse_args(Args)))
