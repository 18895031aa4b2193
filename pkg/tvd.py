"""Transfer via distribution matching.

Alternates between training dual potentials (or an f-divergence critic) on
source and undone target trajectories, and one descent step on the undo map
omega (and the policy theta unless frozen) using score-function plus pathwise
gradient estimators of the divergence.

Dimension keys:
    B: target episodes per iteration
    K: source samples
    N: target samples
    H: horizon
    Hp1: H + 1
    D: coordinate dimension
    A: number of actions
"""

from dataclasses import dataclass, field
import logging
from typing import Callable, Literal

import flax.nnx as nnx
from flax import struct
import jax
import jax.numpy as jnp
import numpy as np
import optax
from tqdm import tqdm

from models.policy import Policy, PolicyActor
from models.potentials import DualPotentials, FPotential
from models.undo_map import UNDO_FAMILIES, UndoMap
from utils.checkpoint import load_policy
from utils.dataloader import DemoSet
from utils.divergences import (
    DivergenceError,
    DivergenceSpec,
    SampleBatch,
    check_finite,
    conjugate,
    feature_dim,
    make_potential_optimizer,
    pair_costs,
    potential_output,
    trajectory_samples,
    update_f_potential,
    update_potentials,
)
from utils.gridworld import (
    GridWorldSpec,
    StateTransform,
    Trajectory,
    episode_keys,
    rollout_batch,
    stream_key,
)
from utils.metrics import (
    METRIC_COLUMNS,
    MetricRow,
    history_rows,
    undo_map_error,
    visitation_sample,
    wasserstein_track,
)

logger = logging.getLogger(__name__)

HISTORY_KEYS = METRIC_COLUMNS[1:]
# Source episodes drawn once to build the undo-map error sample.
ERROR_SAMPLE_EPISODES = 200


@dataclass(frozen=True)
class TvDConfig:
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)
    freeze_policy: bool = True
    learn_undo_map: bool = True
    outer_iterations: int = 500
    outer_lr: float = 0.01
    policy_lr: float = 0.01
    rollout_batch: int = 16
    reward_lambda: float = 0.0
    undo_family: Literal["linear", "affine", "mlp"] = "linear"
    undo_hidden_dims: tuple[int, ...] = (32, 32)
    undo_init_scale: float = 0.1
    score_baseline: Literal["leave_one_out", "none"] = "leave_one_out"
    grad_clip: float = 10.0
    eval_batch: int = 32
    error_samples: int = 1000
    checkpoint_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.outer_iterations < 0:
            raise ValueError(f"outer_iterations must be >= 0, got {self.outer_iterations}.")
        if self.rollout_batch < 1 or self.eval_batch < 1 or self.error_samples < 1:
            raise ValueError("rollout_batch, eval_batch and error_samples must be >= 1.")
        if self.reward_lambda < 0:
            raise ValueError(f"reward_lambda must be nonnegative, got {self.reward_lambda}.")
        if self.undo_family not in UNDO_FAMILIES:
            raise ValueError(f"Unknown undo-map family {self.undo_family!r}.")
        if self.score_baseline not in ("leave_one_out", "none"):
            raise ValueError(f"Unknown score baseline {self.score_baseline!r}.")
        if self.outer_lr <= 0 or self.policy_lr <= 0 or self.grad_clip <= 0:
            raise ValueError("outer_lr, policy_lr and grad_clip must be positive.")
        if self.checkpoint_interval < 1:
            raise ValueError(f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}.")


@dataclass(frozen=True, eq=False)
class SourcePolicy:
    policy: Policy
    theta: jax.Array


def load_source(path: str) -> SourcePolicy | DemoSet:
    """A trajectory file gives a demonstration set, anything else is read as a policy checkpoint."""
    if path.endswith(".array_record"):
        return DemoSet.from_file(path)
    policy, theta, _ = load_policy(path)
    return SourcePolicy(policy, theta)


@struct.dataclass
class TvDState:
    """Parameters and optimizer states of omega, theta and the potentials, plus the metric history."""

    params: dict
    opt_state: dict
    iteration: int
    history: dict

    def rows(self) -> list[MetricRow]:
        return history_rows(self.history)[: int(self.iteration)]


class TvD:
    def __init__(
        self,
        cfg: TvDConfig,
        spec: GridWorldSpec,
        transform: StateTransform,
        source: SourcePolicy | DemoSet,
        policy: Policy | None = None,
    ):
        if cfg.freeze_policy and not isinstance(source, SourcePolicy):
            raise ValueError("freeze_policy requires a source policy.")
        if not cfg.freeze_policy and not isinstance(source, DemoSet):
            raise ValueError("Learning the policy requires a demonstration set.")
        source_spec = source.policy.spec if isinstance(source, SourcePolicy) else source.spec
        if source_spec != spec:
            raise ValueError(f"The source was recorded on {source_spec}, TvD runs on {spec}.")
        if policy is not None and policy.spec != spec:
            raise ValueError(f"The policy was built for {policy.spec}, TvD runs on {spec}.")
        self.cfg = cfg
        self.spec = spec
        self.transform = transform
        self.divergence = cfg.divergence
        self.cost = cfg.divergence.cost

        self.source_policy = source if isinstance(source, SourcePolicy) else None
        self.demos = source if isinstance(source, DemoSet) else None
        if self.source_policy is not None:
            self.policy = self.source_policy.policy
        elif policy is not None:
            self.policy = policy
        else:
            self.policy = Policy(spec, nnx.Rngs(stream_key(cfg.seed, "source_training")))

        self.undo_map = UndoMap(
            spec, cfg.undo_family, cfg.undo_hidden_dims, nnx.Rngs(stream_key(cfg.seed, "undo_init"))
        )
        potential_rngs = nnx.Rngs(stream_key(cfg.seed, "potentials"))
        fdim = feature_dim(spec, self.cost)
        if self.divergence.kind == "wasserstein":
            self.potentials = DualPotentials(fdim, self.divergence.hidden_dims, potential_rngs)
        else:
            self.potentials = FPotential(fdim, self.divergence.hidden_dims, potential_rngs)

        self.actor = PolicyActor(self.policy, self.undo_map)
        self.source_actor = PolicyActor(self.policy)
        self.omega_tx = optax.chain(optax.clip_by_global_norm(cfg.grad_clip), optax.sgd(cfg.outer_lr))
        self.theta_tx = optax.chain(optax.clip_by_global_norm(cfg.grad_clip), optax.sgd(cfg.policy_lr))
        self.potential_tx = make_potential_optimizer(self.divergence)

        self.rollout_key = stream_key(cfg.seed, "rollouts")
        self.eval_key = stream_key(cfg.seed, "evaluation")
        # Iteration keys start at 1, so index 0 of the evaluation stream is free.
        error_key = jax.random.fold_in(self.eval_key, 0)
        self.error_states_ND = visitation_sample(
            self.source_batch(jax.random.fold_in(error_key, 0), ERROR_SAMPLE_EPISODES),
            cfg.error_samples,
            jax.random.fold_in(error_key, 1),
        )
        # Fixed key for the source/target/adapted panels.
        self.panel_key = jax.random.fold_in(error_key, 2)

        self._iterate = jax.jit(self._iteration)
        self._evaluate = jax.jit(self._evaluation)

    # --- Sampling ---
    def source_batch(self, rng: jax.Array, episodes: int) -> Trajectory:
        if self.demos is not None:
            return self.demos.sample(rng, episodes)
        return rollout_batch(
            self.spec,
            StateTransform(),
            self.source_actor,
            {"theta": self.source_policy.theta},
            episode_keys(rng, episodes),
        )

    def undo(self, omega: jax.Array, trajectories: Trajectory) -> Trajectory:
        """u(tau): the undo map applied to every state, actions copied."""
        return trajectories.replace(states=self.undo_map.apply(omega, trajectories.states))

    def undone_rollout_batch(
        self, omega: jax.Array, theta: jax.Array, rng: jax.Array, episodes: int | None = None
    ) -> tuple[Trajectory, Trajectory]:
        """Target rollouts of a ~ pi_theta(.|u_omega(s)), observed and undone."""
        episodes = self.cfg.rollout_batch if episodes is None else episodes
        observed = rollout_batch(
            self.spec,
            self.transform,
            self.actor,
            {"theta": theta, "omega": omega},
            episode_keys(rng, episodes),
        )
        return observed, self.undo(omega, observed)

    # --- Estimators ---
    def trajectory_log_prob(self, theta: jax.Array, omega: jax.Array, observed: Trajectory) -> jax.Array:
        """sum_t log pi_theta(a_t | u_omega(s_t)) for every episode, shape (B,)."""
        fed_BHD = self.undo_map.apply(omega, observed.states[..., :-1, :])
        logp_BHA = jax.nn.log_softmax(self.policy.logits(theta, fed_BHD), axis=-1)
        logp_BH = jnp.take_along_axis(logp_BHA, observed.actions[..., None], axis=-1)[..., 0]
        return jnp.sum(logp_BH * observed.step_mask, axis=-1)

    def target_values(
        self,
        omega: jax.Array,
        source_samples: SampleBatch,
        observed: Trajectory,
        potential_params,
    ) -> tuple[jax.Array, SampleBatch]:
        """Per-sample target-side terms of the divergence estimate.

        Wasserstein: g(x) - alpha * E_source[(h + g - c)_+]; f-divergences: -f*(g(x)).
        Differentiable in omega through the undone states, alignments fixed.
        """
        target = trajectory_samples(self.undo(omega, observed), self.spec, self.cost)
        if self.divergence.kind == "wasserstein":
            cost_KN = pair_costs(source_samples, target, self.cost)
            h_K = self.potentials.h(potential_params, source_samples.features_NF)
            g_N = self.potentials.g(potential_params, target.features_NF)
            hinge_KN = jax.nn.relu(h_K[:, None] + g_N[None, :] - cost_KN)
            return g_N - self.divergence.alpha * (source_samples.weights_N @ hinge_KN), target
        g_N = potential_output(self.divergence.kind, self.potentials(potential_params, target.features_NF))
        return -conjugate(self.divergence.kind, g_N), target

    def _baseline(self, score_B: jax.Array) -> jax.Array:
        B = score_B.shape[0]
        if self.cfg.score_baseline == "none" or B < 2:
            return jnp.zeros_like(score_B)
        return (jnp.sum(score_B) - score_B) / (B - 1)

    def surrogate_loss(
        self,
        theta: jax.Array,
        omega: jax.Array,
        source_samples: SampleBatch,
        observed: Trajectory,
        potential_params,
    ) -> jax.Array:
        """Scalar whose gradient is the estimator of grad (D - lambda * E[R]).

        The score-function part weights the trajectory log-likelihood by the
        frozen per-trajectory pseudo-reward; the pathwise part differentiates
        the per-sample values through u_omega.
        """
        values_N, target = self.target_values(omega, source_samples, observed, potential_params)
        B = observed.length.shape[0]
        weighted_N = target.weights_N * values_N
        per_episode_B = B * jnp.sum(weighted_N.reshape(B, -1), axis=-1)
        score_B = jax.lax.stop_gradient(per_episode_B - self.cfg.reward_lambda * observed.returns)
        score_B = score_B - self._baseline(score_B)
        logp_B = self.trajectory_log_prob(theta, omega, observed)
        return jnp.mean(score_B * logp_B) + jnp.sum(weighted_N)

    def grad_theta(self, source: Trajectory, observed: Trajectory, omega, theta, potential_params) -> jax.Array:
        source_samples = trajectory_samples(source, self.spec, self.cost)
        return jax.grad(self.surrogate_loss, argnums=0)(theta, omega, source_samples, observed, potential_params)

    def grad_omega(self, source: Trajectory, observed: Trajectory, omega, theta, potential_params) -> jax.Array:
        source_samples = trajectory_samples(source, self.spec, self.cost)
        return jax.grad(self.surrogate_loss, argnums=1)(theta, omega, source_samples, observed, potential_params)

    def grad_f_div(self, observed: Trajectory, omega, theta, potential_params) -> tuple[jax.Array, jax.Array]:
        """Gradients of -E[f*(g(u(tau)))] w.r.t. theta and omega; the source term is constant in both."""
        if self.divergence.kind == "wasserstein":
            raise ValueError("grad_f_div needs an f-divergence configuration.")
        empty = SampleBatch(
            features_NF=jnp.zeros((0, self.potentials.feature_dim)),
            weights_N=jnp.zeros((0,)),
            states_NSD=jnp.zeros((0, 1, 2)),
            lengths_N=jnp.zeros((0,), dtype=jnp.int64),
        )
        return jax.grad(self.surrogate_loss, argnums=(0, 1))(theta, omega, empty, observed, potential_params)

    # --- Optimization ---
    def init_state(self) -> TvDState:
        if self.cfg.learn_undo_map:
            omega = self.undo_map.init_params(stream_key(self.cfg.seed, "undo_init"), self.cfg.undo_init_scale)
        else:
            omega = self.undo_map.identity_params()
        theta = self.source_policy.theta if self.source_policy is not None else self.policy.init_params
        potential_params = self.potentials.init_params()
        return TvDState(
            params={"omega": omega, "theta": theta, "potentials": potential_params},
            opt_state={
                "omega": self.omega_tx.init(omega),
                "theta": self.theta_tx.init(theta),
                "potentials": self.potential_tx.init(potential_params),
            },
            iteration=0,
            history={k: np.zeros((0,), dtype=np.float64) for k in HISTORY_KEYS},
        )

    def _update_potentials(self, source_samples, target_samples, potential_params, opt_state):
        div = self.divergence
        if div.kind == "wasserstein":
            return update_potentials(
                source_samples, target_samples, self.potentials, potential_params, div, opt_state
            )
        return update_f_potential(
            source_samples,
            target_samples,
            self.potentials,
            potential_params,
            div.kind,
            div.potential_lr,
            steps=div.inner_steps,
            optimizer=div.potential_optimizer,
            opt_state=opt_state,
        )

    def _iteration(self, params: dict, opt_state: dict, iteration: jax.Array):
        key = jax.random.fold_in(self.rollout_key, iteration)
        source = self.source_batch(jax.random.fold_in(key, 0), self.divergence.batch_size)
        observed, undone = self.undone_rollout_batch(
            params["omega"], params["theta"], jax.random.fold_in(key, 1)
        )
        source_samples = trajectory_samples(source, self.spec, self.cost)
        target_samples = trajectory_samples(undone, self.spec, self.cost)

        potential_params, potential_opt = self._update_potentials(
            source_samples, target_samples, params["potentials"], opt_state["potentials"]
        )
        grad_theta, grad_omega = jax.grad(self.surrogate_loss, argnums=(0, 1))(
            params["theta"], params["omega"], source_samples, observed, potential_params
        )

        omega, omega_opt = params["omega"], opt_state["omega"]
        if self.cfg.learn_undo_map:
            updates, omega_opt = self.omega_tx.update(grad_omega, omega_opt, omega)
            omega = optax.apply_updates(omega, updates)
        theta, theta_opt = params["theta"], opt_state["theta"]
        if not self.cfg.freeze_policy:
            updates, theta_opt = self.theta_tx.update(grad_theta, theta_opt, theta)
            theta = optax.apply_updates(theta, updates)

        metrics = dict(
            target_return=jnp.mean(observed.returns),
            target_goal_rate=jnp.mean(observed.reached_goal.astype(jnp.float64)),
            grad_omega_norm=optax.global_norm(grad_omega),
            grad_theta_norm=optax.global_norm(grad_theta),
        )
        return (
            {"omega": omega, "theta": theta, "potentials": potential_params},
            {"omega": omega_opt, "theta": theta_opt, "potentials": potential_opt},
            metrics,
        )

    def _evaluation(self, params: dict, iteration: jax.Array) -> tuple[jax.Array, jax.Array]:
        key = jax.random.fold_in(self.eval_key, iteration)
        source = self.source_batch(jax.random.fold_in(key, 0), self.cfg.eval_batch)
        _, undone = self.undone_rollout_batch(
            params["omega"], params["theta"], jax.random.fold_in(key, 1), self.cfg.eval_batch
        )
        estimate = wasserstein_track(
            trajectory_samples(source, self.spec, self.cost),
            trajectory_samples(undone, self.spec, self.cost),
            self.potentials,
            params["potentials"],
            self.divergence,
        )
        error = undo_map_error(self.error_states_ND, self.undo_map, params["omega"], self.transform)
        return estimate, error

    def panel_rollouts(
        self, params: dict, episodes: int, rng: jax.Array
    ) -> dict[str, tuple[Trajectory, StateTransform]]:
        """Source, naive target and adapted target episodes, each with the frame it was observed in."""
        theta = params["theta"]
        source = self.source_batch(jax.random.fold_in(rng, 0), episodes)
        target = rollout_batch(
            self.spec,
            self.transform,
            self.source_actor,
            {"theta": theta},
            episode_keys(jax.random.fold_in(rng, 1), episodes),
        )
        adapted, _ = self.undone_rollout_batch(params["omega"], theta, jax.random.fold_in(rng, 2), episodes)
        return {
            "source": (source, StateTransform(center=self.spec.center)),
            "target": (target, self.transform),
            "adapted": (adapted, self.transform),
        }

    def run(
        self,
        state: TvDState | None = None,
        on_iteration: Callable[[TvDState, MetricRow, dict], None] | None = None,
    ) -> TvDState:
        state = self.init_state() if state is None else state
        start = int(state.iteration)
        for iteration in tqdm(
            range(start + 1, self.cfg.outer_iterations + 1),
            initial=start,
            total=self.cfg.outer_iterations,
            desc="tvd",
        ):
            params, opt_state, metrics = self._iterate(state.params, state.opt_state, iteration)
            check_finite(params, "params", iteration)
            check_finite(opt_state, "opt_state", iteration)
            estimate, error = self._evaluate(params, iteration)
            values = {
                "wasserstein_estimate": float(estimate),
                "target_return": float(metrics["target_return"]),
                "undo_map_error": float(error),
            }
            for name, value in values.items():
                if not np.isfinite(value):
                    raise DivergenceError(name, iteration)
            row = MetricRow(iteration=iteration, **values)
            state = TvDState(
                params=params,
                opt_state=opt_state,
                iteration=iteration,
                history={k: np.append(state.history[k], values[k]) for k in HISTORY_KEYS},
            )
            if iteration % self.cfg.checkpoint_interval == 0:
                logger.info(
                    "Iteration %d: estimate %.4f, target return %.2f, undo-map error %.4f",
                    iteration,
                    row.wasserstein_estimate,
                    row.target_return,
                    row.undo_map_error,
                )
            if on_iteration is not None:
                on_iteration(state, row, {k: float(v) for k, v in metrics.items()})
        return state


def run_tvd(
    cfg: TvDConfig,
    spec: GridWorldSpec,
    transform: StateTransform,
    source: SourcePolicy | DemoSet,
    policy: Policy | None = None,
    state: TvDState | None = None,
    on_iteration: Callable[[TvDState, MetricRow, dict], None] | None = None,
) -> TvDState:
    return TvD(cfg, spec, transform, source, policy).run(state, on_iteration)
