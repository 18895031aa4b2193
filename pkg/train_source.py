from dataclasses import dataclass, field, asdict
import logging
import os

import jax
import wandb
import yaml

from models.policy import PolicyActor, evaluate_actor
from utils.checkpoint import save_policy
from utils.config import ExperimentConfig, parse_args, run_cli, save_config
from utils.gridworld import StateTransform, stream_key
from utils.source_training import train_source

logger = logging.getLogger(__name__)


@dataclass
class Args:
    config: str | None = None
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    # Checkpoint path, defaults to <output_dir>/policy_<regime>.ckpt
    out: str = ""
    # Logging
    log: bool = False
    entity: str = ""
    project: str = ""
    name: str = "train_source"
    tags: list[str] = field(default_factory=lambda: ["source"])
    log_interval: int = 5
    wandb_id: str = ""


def main(args: Args) -> None:
    exp = args.experiment
    regime = exp.source_regime
    out = args.out or os.path.join(exp.output_dir, f"policy_{regime}.ckpt")

    if args.log:
        wandb_init_kwargs = {
            "entity": args.entity,
            "project": args.project,
            "name": args.name,
            "tags": args.tags,
            "group": "debug",
            "config": asdict(args),
        }
        if args.wandb_id:
            wandb_init_kwargs.update({"id": args.wandb_id, "resume": "allow"})
        wandb.init(**wandb_init_kwargs)

    def log_fn(iteration: int, metrics: dict) -> None:
        if args.log and iteration % args.log_interval == 0:
            wandb.log({"step": iteration, **metrics})

    logger.info("Training a %s source policy with seed %d", regime, exp.seed)
    result = train_source(exp.gridworld, regime, exp.seed, exp.training, log_fn)

    # Final report on a fresh evaluation stream.
    evaluation, _ = evaluate_actor(
        exp.gridworld,
        StateTransform(center=exp.gridworld.center),
        PolicyActor(result.policy),
        {"theta": result.theta},
        exp.training.eval_episodes,
        jax.random.fold_in(stream_key(exp.seed, "evaluation"), 0),
    )
    save_policy(out, result.policy, result.theta, exp.seed, regime=regime, iterations=result.iterations)
    save_config(exp, os.path.join(os.path.dirname(os.path.abspath(out)), "config.yaml"))
    report = {
        "regime": regime,
        "seed": exp.seed,
        "iterations": result.iterations,
        "gate_evaluation": asdict(result.evaluation),
        "final_evaluation": asdict(evaluation),
        "checkpoint": out,
    }
    with open(os.path.splitext(out)[0] + ".report.yaml", "w") as f:
        yaml.safe_dump(report, f, sort_keys=False)
    logger.info(
        "Saved %s policy to %s (goal rate %.3f, entropy %.3f)",
        regime,
        out,
        evaluation.goal_rate,
        evaluation.mean_entropy,
    )
    if args.log:
        wandb.log({"final/" + k: v for k, v in asdict(evaluation).items()})
        wandb.finish()


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    run_cli(lambda: main(parse_args(Args)))
