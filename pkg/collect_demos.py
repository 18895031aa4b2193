from dataclasses import dataclass, field
import logging
import os
from typing import Literal

import jax.numpy as jnp

from models.policy import EdgeFollowingExpert, PolicyActor, ShortestPathExpert
from utils.checkpoint import load_policy
from utils.config import ConfigError, ExperimentConfig, parse_args, run_cli
from utils.dataloader import trajectory_header, write_trajectory_file
from utils.gridworld import StateTransform, episode_keys, rollout_batch, stream_key

logger = logging.getLogger(__name__)


@dataclass
class Args:
    config: str | None = None
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    # Source: a policy checkpoint, or a built-in expert
    policy: str = ""
    expert: Literal["none", "edge", "shortest"] = "none"
    greedy: bool = False
    n: int = 10
    # Output file, defaults to <output_dir>/demos.array_record
    out: str = ""


def build_actor(args: Args, spec):
    if (args.policy == "") == (args.expert == "none"):
        raise ConfigError("Pass exactly one of --policy or --expert.")
    if args.expert == "edge":
        return EdgeFollowingExpert(spec), None, "expert:edge"
    if args.expert == "shortest":
        return ShortestPathExpert(spec), None, "expert:shortest"
    policy, theta, _ = load_policy(args.policy)
    if policy.spec != spec:
        raise ConfigError(f"{args.policy} was trained on {policy.spec}, the config describes {spec}.")
    return PolicyActor(policy, greedy=args.greedy), {"theta": theta}, f"policy:{args.policy}"


def main(args: Args) -> None:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}.")
    exp = args.experiment
    spec = exp.gridworld
    actor, params, source = build_actor(args, spec)
    out = args.out or os.path.join(exp.output_dir, "demos.array_record")

    transform = StateTransform(center=spec.center)
    trajectories = rollout_batch(
        spec, transform, actor, params, episode_keys(stream_key(exp.seed, "demos"), args.n)
    )
    header = trajectory_header(spec, transform, source, exp.seed, args.n)
    write_trajectory_file(out, trajectories, header)
    logger.info(
        "Wrote %d demonstrations from %s to %s (goal rate %.3f, mean return %.2f)",
        args.n,
        source,
        out,
        float(jnp.mean(trajectories.reached_goal)),
        float(jnp.mean(trajectories.returns)),
    )


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    run_cli(lambda: main(parse_args(Args)))
