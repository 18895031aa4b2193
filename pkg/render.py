from dataclasses import dataclass, field
import logging
import os

from run_tvd import check_source_mode, source_label, write_panels
from tvd import SourcePolicy, TvD, load_source
from utils.checkpoint import load_policy, load_undo_map
from utils.config import ConfigError, ExperimentConfig, parse_args, run_cli

logger = logging.getLogger(__name__)


@dataclass
class Args:
    config: str | None = None
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    # Same --source as the TvD run
    source: str = ""
    # Defaults to <output_dir>/undo_map.ckpt
    undo_map: str = ""
    # Learned policy for demonstration runs, defaults to <output_dir>/policy_learned.ckpt
    policy: str = ""
    episodes: int = 200


def main(args: Args) -> None:
    exp = args.experiment
    if not args.source:
        raise ConfigError("--source is required.")
    if args.episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {args.episodes}.")
    try:
        source = load_source(args.source)
    except ValueError as e:
        raise ConfigError(f"Could not load --source {args.source}: {e}") from e
    check_source_mode(exp, source)

    undo_map, omega, _ = load_undo_map(args.undo_map or os.path.join(exp.output_dir, "undo_map.ckpt"))
    cfg = exp.resolved_tvd()
    if undo_map.family != cfg.undo_family or undo_map.spec != exp.gridworld:
        raise ConfigError("The undo map checkpoint does not match the configured family or grid.")

    if isinstance(source, SourcePolicy):
        theta = source.theta
        tvd = TvD(cfg, exp.gridworld, exp.state_transform, source)
    else:
        policy, theta, _ = load_policy(args.policy or os.path.join(exp.output_dir, "policy_learned.ckpt"))
        if policy.spec != exp.gridworld:
            raise ConfigError("The policy checkpoint does not match the configured grid.")
        tvd = TvD(cfg, exp.gridworld, exp.state_transform, source, policy)

    goal_rates = write_panels(
        tvd, {"theta": theta, "omega": omega}, source_label(exp, source), exp.output_dir, args.episodes
    )
    logger.info("Panel goal rates: %s", goal_rates)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    run_cli(lambda: main(parse_args(Args)))
