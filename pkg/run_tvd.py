from dataclasses import dataclass, field, asdict
import logging
import os

import jax
import numpy as np
import wandb
import yaml

from models.policy import evaluate_actor
from tvd import SourcePolicy, TvD, TvDState, load_source
from utils.checkpoint import (
    make_checkpoint_manager,
    restore_tvd_state,
    save_policy,
    save_potentials,
    save_tvd_state,
    save_undo_map,
)
from utils.config import ConfigError, ExperimentConfig, parse_args, run_cli, save_config
from utils.metrics import kl_from_estimate, render_heatmap, save_heatmap, write_metrics_csv
from utils.parameter_utils import count_parameters_by_component

logger = logging.getLogger(__name__)


@dataclass
class Args:
    config: str | None = None
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    # Policy checkpoint (frozen policy) or .array_record demonstrations
    source: str = ""
    resume: bool = False
    panel_episodes: int = 200
    # Logging
    log: bool = False
    entity: str = ""
    project: str = ""
    name: str = "run_tvd"
    tags: list[str] = field(default_factory=lambda: ["tvd"])
    log_interval: int = 5
    wandb_id: str = ""


def source_label(exp: ExperimentConfig, source) -> str:
    return exp.source_regime if isinstance(source, SourcePolicy) else "demos"


def check_source_mode(exp: ExperimentConfig, source) -> None:
    frozen = exp.tvd.freeze_policy
    if frozen and not isinstance(source, SourcePolicy):
        raise ConfigError("tvd.freeze_policy needs a policy checkpoint as --source.")
    if not frozen and isinstance(source, SourcePolicy):
        raise ConfigError("Learning the policy (tvd.freeze_policy false) needs demonstrations as --source.")
    grid = source.policy.spec if isinstance(source, SourcePolicy) else source.spec
    if grid != exp.gridworld:
        raise ConfigError(f"The source was recorded on {grid}, the config describes {exp.gridworld}.")


def write_panels(tvd: TvD, params: dict, label: str, output_dir: str, episodes: int) -> dict:
    """Heatmaps of source, naive target and adapted target rollouts; returns the adapted goal rate."""
    panels = tvd.panel_rollouts(params, episodes, tvd.panel_key)
    for domain, (trajectories, transform) in panels.items():
        heatmap = render_heatmap(trajectories, tvd.spec, transform)
        save_heatmap(
            heatmap,
            os.path.join(output_dir, f"heatmap_{domain}_{label}.svg"),
            os.path.join(output_dir, f"counts_{domain}_{label}.csv"),
            title=f"{domain} ({label})",
        )
    return {
        domain: float(np.mean(np.asarray(trajectories.reached_goal)))
        for domain, (trajectories, _) in panels.items()
    }


def main(args: Args) -> None:
    exp = args.experiment
    if not args.source:
        raise ConfigError("--source is required.")
    if args.panel_episodes < 1:
        raise ConfigError(f"--panel-episodes must be >= 1, got {args.panel_episodes}.")
    try:
        source = load_source(args.source)
    except ValueError as e:
        raise ConfigError(f"Could not load --source {args.source}: {e}") from e
    check_source_mode(exp, source)
    cfg = exp.resolved_tvd()
    label = source_label(exp, source)
    output_dir = exp.output_dir
    os.makedirs(output_dir, exist_ok=True)
    save_config(exp, os.path.join(output_dir, "config.yaml"))

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

    tvd = TvD(cfg, exp.gridworld, exp.state_transform, source)
    manager = make_checkpoint_manager(os.path.join(output_dir, "checkpoints"))
    state = None
    if args.resume:
        restored = restore_tvd_state(manager, tvd.init_state())
        state = restored.replace(
            iteration=int(restored.iteration),
            history={k: np.asarray(v, dtype=np.float64) for k, v in restored.history.items()},
        )
        logger.info("Resuming from iteration %d", state.iteration)

    counts = count_parameters_by_component((state or tvd.init_state()).params)
    logger.info("Parameter counts: %s", counts)
    metrics_path = os.path.join(output_dir, "metrics.csv")

    def on_iteration(state: TvDState, row, metrics: dict) -> None:
        if args.log and row.iteration % args.log_interval == 0:
            wandb.log({"step": row.iteration, **asdict(row), **metrics})
        if row.iteration % cfg.checkpoint_interval == 0:
            save_tvd_state(manager, row.iteration, state)
            write_metrics_csv(state.rows(), metrics_path)

    try:
        state = tvd.run(state, on_iteration)
    finally:
        manager.close()
    write_metrics_csv(state.rows(), metrics_path)

    params = state.params
    iterations = int(state.iteration)
    save_undo_map(
        os.path.join(output_dir, "undo_map.ckpt"),
        tvd.undo_map,
        params["omega"],
        cfg.seed,
        iterations=iterations,
        source=args.source,
    )
    save_potentials(
        os.path.join(output_dir, "potentials.ckpt"),
        tvd.potentials,
        params["potentials"],
        cfg.divergence.kind,
        cfg.seed,
        iterations=iterations,
    )
    if not cfg.freeze_policy:
        save_policy(
            os.path.join(output_dir, "policy_learned.ckpt"), tvd.policy, params["theta"], cfg.seed, iterations=iterations
        )

    goal_rates = write_panels(tvd, params, label, output_dir, args.panel_episodes)
    composed, _ = evaluate_actor(
        tvd.spec,
        tvd.transform,
        tvd.actor,
        {"theta": params["theta"], "omega": params["omega"]},
        args.panel_episodes,
        jax.random.fold_in(tvd.panel_key, 3),
    )
    rows = state.rows()
    report = {
        "source": args.source,
        "iterations": iterations,
        "divergence": cfg.divergence.kind,
        "final": asdict(rows[-1]) if rows else None,
        "panel_goal_rates": goal_rates,
        "composed_evaluation": asdict(composed),
        "parameter_counts": counts,
    }
    if rows and cfg.divergence.kind == "kl":
        report["kl"] = kl_from_estimate(rows[-1].wasserstein_estimate)
        logger.info("Final KL estimate %.4f", report["kl"])
    with open(os.path.join(output_dir, "tvd_report.yaml"), "w") as f:
        yaml.safe_dump(report, f, sort_keys=False)
    logger.info(
        "Finished %d iterations: composed goal rate %.3f, artifacts in %s",
        iterations,
        composed.goal_rate,
        output_dir,
    )
    if args.log:
        wandb.log({"final/" + k: v for k, v in asdict(composed).items()})
        wandb.finish()


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    run_cli(lambda: main(parse_args(Args)))
