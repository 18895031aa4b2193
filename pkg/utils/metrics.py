"""Tracked curves, undo-map error and trajectory-distribution heatmaps.

Dimension keys:
    B: number of episodes
    S: states per episode (H + 1)
    N: number of sampled states
    D: coordinate dimension
    Y: grid height
    X: grid width
    A: number of move directions
"""

from dataclasses import dataclass, asdict
import os

import jax
import jax.numpy as jnp
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from models.undo_map import UndoMap
from utils.divergences import (
    KL_CONJUGATE_OFFSET,
    DivergenceSpec,
    SampleBatch,
    f_div_objective,
    wasserstein_estimate,
)
from utils.gridworld import GridWorldSpec, StateTransform, Trajectory, apply_transform

METRIC_COLUMNS = ("iteration", "wasserstein_estimate", "target_return", "undo_map_error")
_DIRECTIONS = ("left", "right", "up", "down")
_DIRECTION_DELTAS_AD = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])


@dataclass(frozen=True)
class MetricRow:
    iteration: int
    wasserstein_estimate: float
    target_return: float
    undo_map_error: float

    def __post_init__(self):
        for name in METRIC_COLUMNS[1:]:
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite at iteration {self.iteration}.")


def history_rows(history: dict[str, np.ndarray]) -> list[MetricRow]:
    n = len(history["wasserstein_estimate"])
    return [
        MetricRow(
            iteration=i + 1,
            wasserstein_estimate=float(history["wasserstein_estimate"][i]),
            target_return=float(history["target_return"][i]),
            undo_map_error=float(history["undo_map_error"][i]),
        )
        for i in range(n)
    ]


def write_metrics_csv(rows: list[MetricRow], path: str) -> None:
    df = pd.DataFrame([asdict(row) for row in rows], columns=list(METRIC_COLUMNS))
    df.to_csv(path, index=False, float_format="%.17g")


def read_metrics_csv(path: str) -> list[MetricRow]:
    df = pd.read_csv(path)
    if tuple(df.columns) != METRIC_COLUMNS:
        raise ValueError(f"{path} has columns {list(df.columns)}, expected {list(METRIC_COLUMNS)}.")
    return [
        MetricRow(int(r.iteration), float(r.wasserstein_estimate), float(r.target_return), float(r.undo_map_error))
        for r in df.itertuples(index=False)
    ]


def visitation_sample(trajectories: Trajectory, num_states: int, key: jax.Array) -> jax.Array:
    """Draws states from the empirical state-visitation distribution of a batch."""
    states_ND = trajectories.states.reshape(-1, trajectories.states.shape[-1])
    weights_BS = trajectories.state_mask / (trajectories.length[:, None] + 1)
    p_N = weights_BS.reshape(-1) / jnp.sum(weights_BS)
    idx = jax.random.choice(key, states_ND.shape[0], shape=(num_states,), p=p_N)
    return states_ND[idx]


def undo_map_error(
    source_states_ND: jax.Array,
    undo_map: UndoMap,
    omega: jax.Array,
    transform: StateTransform,
) -> jax.Array:
    """Mean squared distance between p and u(T(p)) over source-domain states p."""
    source_states_ND = jnp.asarray(source_states_ND, jnp.float64)
    recovered_ND = undo_map.apply(omega, apply_transform(transform, source_states_ND))
    return jnp.mean(jnp.sum(jnp.square(source_states_ND - recovered_ND), axis=-1))


def wasserstein_track(
    batch_source: SampleBatch,
    batch_undone: SampleBatch,
    potentials,
    params,
    spec: DivergenceSpec,
) -> jax.Array:
    """Divergence estimate on held-out batches with the current potentials.

    f-divergence kinds report the variational value; for KL the divergence
    itself is this value plus KL_CONJUGATE_OFFSET.
    """
    if spec.kind == "wasserstein":
        return wasserstein_estimate(batch_source, batch_undone, potentials, params, spec).value
    return f_div_objective(batch_source, batch_undone, potentials, params, spec.kind)


def kl_from_estimate(value: float) -> float:
    return value + KL_CONJUGATE_OFFSET


@dataclass
class TrajectoryHeatmap:
    """Visit and transition counts of a set of episodes on the observed grid.

    Off-lattice states are snapped to the nearest cell inside the grid.
    """

    width: int
    height: int
    visits_YX: np.ndarray
    edges_YXA: np.ndarray
    starts_YX: np.ndarray
    start: tuple[float, float]
    goal: tuple[float, float]
    num_episodes: int

    def to_frame(self) -> pd.DataFrame:
        ys, xs = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        data = {
            "x": xs.ravel(),
            "y": ys.ravel(),
            "visits": self.visits_YX.ravel(),
            "starts": self.starts_YX.ravel(),
        }
        for a, name in enumerate(_DIRECTIONS):
            data[f"edges_{name}"] = self.edges_YXA[..., a].ravel()
        return pd.DataFrame(data)


def _snap(states_ND: np.ndarray, spec: GridWorldSpec) -> np.ndarray:
    cells_ND = np.rint(states_ND).astype(np.int64)
    return np.clip(cells_ND, 0, [spec.width - 1, spec.height - 1])


def render_heatmap(
    episodes: Trajectory,
    spec: GridWorldSpec,
    transform: StateTransform = StateTransform(),
) -> TrajectoryHeatmap:
    """Accumulates counts over a batch of episodes, in the frame they were observed in."""
    states_BSD = np.asarray(episodes.states)
    mask_BS = np.asarray(episodes.state_mask)
    if states_BSD.shape[0] == 0:
        raise ValueError("render_heatmap needs at least one episode.")
    visits_YX = np.zeros((spec.height, spec.width), dtype=np.int64)
    edges_YXA = np.zeros((spec.height, spec.width, len(_DIRECTIONS)), dtype=np.int64)
    starts_YX = np.zeros((spec.height, spec.width), dtype=np.int64)

    cells_BSD = _snap(states_BSD, spec)
    visited_ND = cells_BSD[mask_BS]
    np.add.at(visits_YX, (visited_ND[:, 1], visited_ND[:, 0]), 1)
    np.add.at(starts_YX, (cells_BSD[:, 0, 1], cells_BSD[:, 0, 0]), 1)

    moved_BS = mask_BS[:, 1:]
    delta_BSD = cells_BSD[:, 1:] - cells_BSD[:, :-1]
    for a, delta_D in enumerate(_DIRECTION_DELTAS_AD):
        hit_BS = moved_BS & np.all(delta_BSD == delta_D, axis=-1)
        origin_ND = cells_BSD[:, :-1][hit_BS]
        np.add.at(edges_YXA[..., a], (origin_ND[:, 1], origin_ND[:, 0]), 1)

    start = tuple(float(c) for c in np.asarray(apply_transform(transform, jnp.asarray(spec.start))))
    goal = tuple(float(c) for c in np.asarray(apply_transform(transform, jnp.asarray(spec.goal))))
    return TrajectoryHeatmap(
        width=spec.width,
        height=spec.height,
        visits_YX=visits_YX,
        edges_YXA=edges_YXA,
        starts_YX=starts_YX,
        start=start,
        goal=goal,
        num_episodes=states_BSD.shape[0],
    )


def save_heatmap(
    heatmap: TrajectoryHeatmap,
    svg_path: str,
    counts_path: str | None = None,
    title: str = "",
    cmap: str = "Greys",
) -> None:
    """Writes the panel as SVG (darker = more visits) and the raw counts as CSV."""
    plt.rcParams["svg.hashsalt"] = "trajectory-heatmap"
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.imshow(
        heatmap.visits_YX,
        cmap=cmap,
        vmin=0,
        vmax=max(int(heatmap.visits_YX.max()), 1),
        origin="upper",
        extent=(-0.5, heatmap.width - 0.5, heatmap.height - 0.5, -0.5),
        interpolation="none",
    )
    total_edges = max(int(heatmap.edges_YXA.sum()), 1)
    for a, delta_D in enumerate(_DIRECTION_DELTAS_AD):
        ys, xs = np.nonzero(heatmap.edges_YXA[..., a])
        for y, x in zip(ys, xs):
            weight = heatmap.edges_YXA[y, x, a] / total_edges
            ax.plot(
                [x, x + delta_D[0]],
                [y, y + delta_D[1]],
                color="tab:blue",
                alpha=min(1.0, 0.2 + 5.0 * weight),
                linewidth=0.5 + 4.0 * weight,
            )
    ax.scatter(*heatmap.start, s=120, marker="D", facecolors="none", edgecolors="tab:green", linewidths=2, zorder=5)
    ax.scatter(*heatmap.goal, s=160, marker="*", facecolors="none", edgecolors="tab:red", linewidths=2, zorder=5)
    ax.set_xticks(np.arange(heatmap.width))
    ax.set_yticks(np.arange(heatmap.height))
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(svg_path)), exist_ok=True)
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    if counts_path is not None:
        heatmap.to_frame().to_csv(counts_path, index=False)
