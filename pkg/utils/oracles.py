"""Exact reference solvers used to check the estimators on small instances.

Dimension keys:
    K: support size of the first distribution
    N: support size of the second distribution
    T: number of enumerated trajectories
    H: horizon
    D: coordinate dimension
"""

from collections import deque

import jax.numpy as jnp
import numpy as np
from scipy.optimize import linprog

from utils.costs import pairwise_costs
from utils.gridworld import (
    NUM_ACTIONS,
    GridWorldSpec,
    StateTransform,
    Trajectory,
    apply_transform,
    step,
)

OT_MAX_POINTS = 12
DTW_MAX_LENGTH = 10
ENUM_MAX_TRAJECTORIES = 20_000


class OracleLimitError(ValueError):
    """Raised when an instance exceeds what an exhaustive oracle accepts."""


def exact_ot(points1_KD, weights1_K, points2_ND, weights2_N) -> float:
    """Earth mover's distance with Euclidean ground cost, solved as a linear program."""
    points1_KD = np.asarray(points1_KD, dtype=np.float64)
    points2_ND = np.asarray(points2_ND, dtype=np.float64)
    w1_K = np.asarray(weights1_K, dtype=np.float64)
    w2_N = np.asarray(weights2_N, dtype=np.float64)
    K, N = len(w1_K), len(w2_N)
    if K > OT_MAX_POINTS or N > OT_MAX_POINTS:
        raise OracleLimitError(
            f"ot-lp accepts at most {OT_MAX_POINTS} points per side, got {K} and {N}."
        )
    if not (np.isclose(w1_K.sum(), 1.0) and np.isclose(w2_N.sum(), 1.0)):
        raise ValueError("Both weight vectors must sum to 1.")
    cost_KN = np.asarray(pairwise_costs(points1_KD, points2_ND))
    a_eq = np.zeros((K + N, K * N))
    for k in range(K):
        a_eq[k, k * N : (k + 1) * N] = 1.0
    for n in range(N):
        a_eq[K + n, n::N] = 1.0
    sol = linprog(
        cost_KN.ravel(),
        A_eq=a_eq,
        b_eq=np.concatenate([w1_K, w2_N]),
        bounds=(0, None),
        method="highs",
    )
    if not sol.success:
        raise RuntimeError(f"Transport LP failed: {sol.message}")
    return float(sol.fun)


def dtw_brute(t1_ND, t2_MD) -> float:
    """Minimum over every monotone contiguous warping path of the summed base cost.

    Path costs are summed from (0, 0) forwards.
    """
    cost_NM = np.asarray(pairwise_costs(np.asarray(t1_ND), np.asarray(t2_MD)))
    N, M = cost_NM.shape
    if N == 0 or M == 0:
        raise ValueError("dtw-brute requires two nonempty sequences.")
    if N > DTW_MAX_LENGTH or M > DTW_MAX_LENGTH:
        raise OracleLimitError(
            f"dtw-brute accepts sequences of length at most {DTW_MAX_LENGTH}, got {N} and {M}."
        )
    best = np.inf
    stack = [(0, 0, cost_NM[0, 0])]
    while stack:
        i, j, total = stack.pop()
        if i == N - 1 and j == M - 1:
            best = min(best, total)
            continue
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < N and j + dj < M:
                stack.append((i + di, j + dj, total + cost_NM[i + di, j + dj]))
    return float(best)


def bfs_distances(spec: GridWorldSpec) -> np.ndarray:
    """Steps to the goal from every cell, indexed [x, y]."""
    dist_XY = np.full((spec.width, spec.height), -1, dtype=np.int64)
    gx, gy = spec.goal
    dist_XY[gx, gy] = 0
    queue = deque([(gx, gy)])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < spec.width and 0 <= ny < spec.height and dist_XY[nx, ny] < 0:
                dist_XY[nx, ny] = dist_XY[x, y] + 1
                queue.append((nx, ny))
    return dist_XY


def shortest_path_length(spec: GridWorldSpec) -> int:
    return int(bfs_distances(spec)[spec.start[0], spec.start[1]])


def fdiv_exact(p_K, q_K, kind: str) -> float:
    """Closed-form D_f(P || Q) = sum_x q(x) f(p(x) / q(x)) on a shared discrete support."""
    p_K = np.asarray(p_K, dtype=np.float64)
    q_K = np.asarray(q_K, dtype=np.float64)
    if p_K.shape != q_K.shape:
        raise ValueError(f"Supports differ in size: {p_K.shape} vs {q_K.shape}.")
    if kind == "tv":
        return float(0.5 * np.abs(p_K - q_K).sum())
    if np.any((q_K == 0) & (p_K > 0)):
        return float("inf")
    support = q_K > 0
    p, q = p_K[support], q_K[support]
    if kind == "chi2":
        return float(np.sum(np.square(p - q) / q))
    if kind == "kl":
        nz = p > 0
        return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))
    raise ValueError(f"Unknown f-divergence {kind!r}.")


def toy_corridor_spec() -> GridWorldSpec:
    """Two cells and a horizon of three: only Right changes the state.

    The action space stays the full four grid actions; Left, Up and Down hit
    a wall and leave the agent in place. Enumerated episodes therefore count
    every wall-bumping action separately (40 episodes).
    """
    return GridWorldSpec(width=2, height=1, start=(0, 0), goal=(1, 0), horizon=3)


def enumerate_action_sequences(spec: GridWorldSpec) -> list[tuple[int, ...]]:
    """Every distinct episode as the actions taken, in lexicographic order."""
    sequences = []

    def expand(state, actions):
        if len(sequences) > ENUM_MAX_TRAJECTORIES:
            raise OracleLimitError(
                f"enum-mdp stops at {ENUM_MAX_TRAJECTORIES} trajectories."
            )
        for a in range(NUM_ACTIONS):
            next_state, _, done = step(spec, state, a)
            if done or len(actions) + 1 == spec.horizon:
                sequences.append((*actions, a))
            else:
                expand(next_state, (*actions, a))

    expand(spec.start, ())
    return sequences


def trajectories_from_actions(
    spec: GridWorldSpec,
    transform: StateTransform,
    sequences: list[tuple[int, ...]],
) -> Trajectory:
    """Replays action sequences into a padded trajectory batch in observed coordinates."""
    T, H = len(sequences), spec.horizon
    states_THp1D = np.zeros((T, H + 1, 2))
    actions_TH = np.zeros((T, H), dtype=np.int64)
    rewards_TH = np.zeros((T, H))
    lengths_T = np.zeros((T,), dtype=np.int64)
    reached_T = np.zeros((T,), dtype=bool)
    for i, actions in enumerate(sequences):
        state = spec.start
        cells = [state]
        for t, a in enumerate(actions):
            state, reward, done = step(spec, state, a)
            cells.append(state)
            actions_TH[i, t] = a
            rewards_TH[i, t] = reward
            reached_T[i] = done
        cells += [state] * (H + 1 - len(cells))
        states_THp1D[i] = np.asarray(cells, dtype=np.float64)
        lengths_T[i] = len(actions)
    observed_THp1D = apply_transform(transform, jnp.asarray(states_THp1D))
    return Trajectory(
        states=observed_THp1D,
        actions=jnp.asarray(actions_TH),
        rewards=jnp.asarray(rewards_TH),
        length=jnp.asarray(lengths_T),
        reached_goal=jnp.asarray(reached_T),
    )


def exact_expectation(log_prob_T, values_T):
    """Sum over enumerated trajectories of p(tau) * value(tau)."""
    return jnp.sum(jnp.exp(log_prob_T) * values_T)
