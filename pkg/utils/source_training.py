"""Entropy-regularized episodic policy gradient producing the three source regimes.

Dimension keys:
    B: episodes per update
    H: horizon
    A: number of actions
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Callable

import flax.nnx as nnx
import jax
import jax.numpy as jnp
import optax
from tqdm import tqdm

from models.policy import Policy, PolicyActor, PolicyEvaluation, evaluate_actor
from utils.gridworld import (
    GridWorldSpec,
    StateTransform,
    Trajectory,
    episode_keys,
    rollout_batch,
    stream_key,
)
from utils.lr_utils import get_lr_schedule

logger = logging.getLogger(__name__)

REGIMES = ("low_entropy_optimal", "high_entropy_optimal", "high_entropy_suboptimal")


class RegimeError(RuntimeError):
    """Raised when the training budget ends before the regime gates are met."""

    def __init__(self, regime: str, evaluation: PolicyEvaluation | None, failures: list[str]):
        self.regime = regime
        self.evaluation = evaluation
        self.failures = failures
        super().__init__(f"Source policy does not exhibit {regime}: {'; '.join(failures)}")


@dataclass(frozen=True)
class RegimeGate:
    min_goal_rate: float = 0.0
    max_goal_rate: float = 1.0
    min_entropy: float = 0.0
    max_entropy: float = math.inf

    def failures(self, evaluation: PolicyEvaluation) -> list[str]:
        failures = []
        if evaluation.goal_rate < self.min_goal_rate:
            failures.append(f"goal rate {evaluation.goal_rate:.3f} < {self.min_goal_rate}")
        if evaluation.goal_rate > self.max_goal_rate:
            failures.append(f"goal rate {evaluation.goal_rate:.3f} > {self.max_goal_rate}")
        if evaluation.mean_entropy < self.min_entropy:
            failures.append(f"entropy {evaluation.mean_entropy:.3f} < {self.min_entropy}")
        if evaluation.mean_entropy > self.max_entropy:
            failures.append(f"entropy {evaluation.mean_entropy:.3f} > {self.max_entropy}")
        return failures


REGIME_GATES = {
    "low_entropy_optimal": RegimeGate(min_goal_rate=0.95, max_entropy=0.3),
    "high_entropy_optimal": RegimeGate(min_goal_rate=0.95, min_entropy=0.7),
    "high_entropy_suboptimal": RegimeGate(min_goal_rate=0.1, max_goal_rate=0.8, min_entropy=0.7),
}
# Negative: an entropy penalty that breaks the tie between Right and Down.
DEFAULT_ENTROPY_COEF = {
    "low_entropy_optimal": -0.05,
    "high_entropy_optimal": 0.7,
    "high_entropy_suboptimal": 0.7,
}
DEFAULT_MIN_ITERATIONS = {
    "low_entropy_optimal": 1,
    "high_entropy_optimal": 1,
    "high_entropy_suboptimal": 5,
}


@dataclass(frozen=True)
class SourceTrainingConfig:
    max_iterations: int = 1000
    batch_size: int = 64
    lr_schedule: str = "constant"
    init_lr: float = 0.0
    max_lr: float = 1e-2
    decay_end: float = 0.0
    warmup_steps: int = 0
    wsd_decay_steps: int = 0
    entropy_coef: float | None = None
    min_iterations: int | None = None
    eval_interval: int = 5
    eval_episodes: int = 200
    hidden_dims: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        if self.max_iterations < 1 or self.batch_size < 1:
            raise ValueError("max_iterations and batch_size must be >= 1.")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise ValueError("eval_interval and eval_episodes must be >= 1.")


@dataclass
class SourceTrainingResult:
    policy: Policy
    theta: jax.Array
    evaluation: PolicyEvaluation
    iterations: int
    history: list[dict] = field(default_factory=list)


def policy_gradient_loss(
    policy: Policy, theta: jax.Array, trajectories: Trajectory, entropy_coef: float
) -> tuple[jax.Array, dict]:
    """REINFORCE on reward-to-go with a per-timestep batch-mean baseline, plus an entropy bonus."""
    B = trajectories.length.shape[0]
    mask_BH = trajectories.step_mask
    logp_BHA = jax.nn.log_softmax(policy.logits(theta, trajectories.states[:, :-1]), axis=-1)
    logp_BH = jnp.take_along_axis(logp_BHA, trajectories.actions[..., None], axis=-1)[..., 0]
    entropy_BH = -jnp.sum(jnp.exp(logp_BHA) * logp_BHA, axis=-1)

    rewards_BH = trajectories.rewards * mask_BH
    reward_to_go_BH = jnp.flip(jnp.cumsum(jnp.flip(rewards_BH, -1), -1), -1)
    active_H = jnp.maximum(jnp.sum(mask_BH, axis=0), 1)
    baseline_H = jnp.sum(reward_to_go_BH * mask_BH, axis=0) / active_H
    advantage_BH = jax.lax.stop_gradient((reward_to_go_BH - baseline_H) * mask_BH)

    pg_loss = -jnp.sum(advantage_BH * logp_BH) / B
    entropy_sum = jnp.sum(entropy_BH * mask_BH) / B
    loss = pg_loss - entropy_coef * entropy_sum
    metrics = dict(
        loss=loss,
        pg_loss=pg_loss,
        entropy=jnp.sum(entropy_BH * mask_BH) / jnp.maximum(jnp.sum(mask_BH), 1),
        mean_return=jnp.mean(trajectories.returns),
        goal_rate=jnp.mean(trajectories.reached_goal.astype(jnp.float64)),
    )
    return loss, metrics


def make_train_step(
    policy: Policy,
    spec: GridWorldSpec,
    tx: optax.GradientTransformation,
    entropy_coef: float,
    batch_size: int,
):
    actor = PolicyActor(policy)

    @jax.jit
    def train_step(theta, opt_state, key):
        trajectories = rollout_batch(
            spec, StateTransform(), actor, {"theta": theta}, episode_keys(key, batch_size)
        )
        (_, metrics), grads = jax.value_and_grad(
            lambda p: policy_gradient_loss(policy, p, trajectories, entropy_coef), has_aux=True
        )(theta)
        updates, opt_state = tx.update(grads, opt_state, theta)
        return optax.apply_updates(theta, updates), opt_state, metrics

    return train_step


def train_source(
    spec: GridWorldSpec,
    regime: str,
    seed: int,
    config: SourceTrainingConfig = SourceTrainingConfig(),
    log_fn: Callable[[int, dict], None] | None = None,
) -> SourceTrainingResult:
    """Trains until the regime gates pass at an evaluation point, else raises RegimeError."""
    if regime not in REGIMES:
        raise ValueError(f"Unknown regime {regime!r}, use one of {REGIMES}")
    gate = REGIME_GATES[regime]
    entropy_coef = DEFAULT_ENTROPY_COEF[regime] if config.entropy_coef is None else config.entropy_coef
    min_iterations = (
        DEFAULT_MIN_ITERATIONS[regime] if config.min_iterations is None else config.min_iterations
    )

    train_key = stream_key(seed, "source_training")
    eval_key = stream_key(seed, "evaluation")
    policy = Policy(spec, nnx.Rngs(jax.random.fold_in(train_key, 0)), hidden_dims=config.hidden_dims)
    theta = policy.init_params

    lr_schedule = get_lr_schedule(config)
    tx = optax.adam(lr_schedule)
    opt_state = tx.init(theta)
    train_step = make_train_step(policy, spec, tx, entropy_coef, config.batch_size)
    eval_actor = PolicyActor(policy)

    history = []
    evaluation, failures = None, ["no evaluation was run"]
    for iteration in tqdm(range(1, config.max_iterations + 1), desc=f"train {regime}"):
        theta, opt_state, metrics = train_step(theta, opt_state, jax.random.fold_in(train_key, iteration))
        metrics = {k: float(v) for k, v in metrics.items()}
        metrics["lr"] = float(lr_schedule(iteration - 1))
        history.append(metrics)
        if log_fn is not None:
            log_fn(iteration, metrics)
        if iteration < min_iterations or iteration % config.eval_interval != 0:
            continue
        evaluation, _ = evaluate_actor(
            spec,
            StateTransform(),
            eval_actor,
            {"theta": theta},
            config.eval_episodes,
            jax.random.fold_in(eval_key, iteration),
        )
        failures = gate.failures(evaluation)
        logger.info(
            "Iteration %d: goal rate %.3f, return %.2f, entropy %.3f",
            iteration,
            evaluation.goal_rate,
            evaluation.mean_return,
            evaluation.mean_entropy,
        )
        if not failures:
            return SourceTrainingResult(policy, theta, evaluation, iteration, history)
    raise RegimeError(regime, evaluation, failures)


def verify_regime(regime: str, evaluation: PolicyEvaluation) -> list[str]:
    return REGIME_GATES[regime].failures(evaluation)
