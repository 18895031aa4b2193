import numpy as np
from pathlib import Path

from utils.dataloader import trajectory_header, write_trajectory_file
from utils.gridworld import NUM_ACTIONS, GridWorldSpec, StateTransform, step
from utils.oracles import trajectories_from_actions


def random_action_sequences(spec: GridWorldSpec, num_trajectories: int, seed: int) -> list[tuple[int, ...]]:
    """Uniform random walks, each cut at the goal or the horizon."""
    rng = np.random.default_rng(seed)
    sequences = []
    for _ in range(num_trajectories):
        state, actions = spec.start, []
        for _ in range(spec.horizon):
            a = int(rng.integers(NUM_ACTIONS))
            state, _, done = step(spec, state, a)
            actions.append(a)
            if done:
                break
        sequences.append(tuple(actions))
    return sequences


def generate_dummy_trajectories(
    output_path: Path,
    spec: GridWorldSpec = GridWorldSpec(width=4, height=3, goal=(3, 2), horizon=12),
    num_trajectories: int = 5,
    seed: int = 42,
):
    """Generates a dummy trajectory file of random walks for testing; returns the in-memory batch."""
    print(f"Generating dummy trajectory file at {output_path}")
    output_path.parent.mkdir(parents=True, exist_ok=True)
    transform = StateTransform(center=spec.center)
    trajectories = trajectories_from_actions(
        spec, transform, random_action_sequences(spec, num_trajectories, seed)
    )
    header = trajectory_header(spec, transform, "random-walk", seed, num_trajectories)
    write_trajectory_file(str(output_path), trajectories, header)
    print("Dummy trajectory file generation complete.")
    return trajectories


if __name__ == "__main__":
    test_dir = Path("tests/data/dummy_trajectories")
    test_dir.mkdir(parents=True, exist_ok=True)
    dummy_file = test_dir / "dummy_demos.array_record"

    generate_dummy_trajectories(dummy_file, num_trajectories=5)
    print(f"Generated dummy file: {dummy_file}")
