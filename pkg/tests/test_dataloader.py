import unittest
import numpy as np
import tempfile
from pathlib import Path

import jax

from utils.dataloader import DemoSet, pad_trajectory, read_trajectory_file, spec_from_header
from utils.gridworld import GridWorldSpec
from tests.data.generate_dummy_data import generate_dummy_trajectories


class TrajectoryFileTest(unittest.TestCase):

    def setUp(self):
        super().setUp()
        self._temp_dir_manager = tempfile.TemporaryDirectory()
        self.test_data_dir = Path(self._temp_dir_manager.name)
        self.addCleanup(self._temp_dir_manager.cleanup)

        self.spec = GridWorldSpec(width=4, height=3, goal=(3, 2), horizon=12)
        self.num_trajectories = 6
        self.dummy_file = self.test_data_dir / "dummy_demos.array_record"
        self.trajectories = generate_dummy_trajectories(
            self.dummy_file, self.spec, num_trajectories=self.num_trajectories, seed=42
        )

    def test_file_round_trip_equals_in_memory_trajectories(self):
        header, loaded = read_trajectory_file(str(self.dummy_file))
        self.assertEqual(header["num_trajectories"], self.num_trajectories)
        self.assertEqual(header["source"], "random-walk")
        for name in ("states", "actions", "rewards", "length", "reached_goal"):
            np.testing.assert_array_equal(
                np.asarray(getattr(loaded, name)),
                np.asarray(getattr(self.trajectories, name)),
                err_msg=f"{name} changed on disk",
            )

    def test_header_restores_grid_and_transform(self):
        header, _ = read_trajectory_file(str(self.dummy_file))
        spec, transform = spec_from_header(header)
        self.assertEqual(spec, self.spec)
        self.assertEqual(transform.kind, "identity")

    def test_missing_file_raises(self):
        with self.assertRaises(FileNotFoundError):
            read_trajectory_file(str(self.test_data_dir / "missing.array_record"))

    def test_demo_set_sampling_is_reproducible(self):
        demos = DemoSet.from_file(str(self.dummy_file))
        self.assertEqual(len(demos), self.num_trajectories)
        key = jax.random.key(42)
        batch1 = demos.sample(key, 16)
        batch2 = demos.sample(key, 16)
        np.testing.assert_array_equal(np.asarray(batch1.states), np.asarray(batch2.states))
        self.assertEqual(batch1.states.shape, (16, self.spec.horizon + 1, 2))

    def test_demo_set_rejects_out_of_grid_states(self):
        shifted = self.trajectories.replace(states=self.trajectories.states + 10.0)
        with self.assertRaises(ValueError):
            DemoSet(shifted, self.spec)


class PadTrajectoryTest(unittest.TestCase):

    def test_pads_with_final_state(self):
        states = np.array([[0.0, 0.0], [1.0, 0.0]])
        padded = pad_trajectory(states, np.array([1]), np.array([-1.0]), True, horizon=3)
        np.testing.assert_array_equal(
            np.asarray(padded.states), [[0, 0], [1, 0], [1, 0], [1, 0]]
        )
        np.testing.assert_array_equal(np.asarray(padded.actions), [1, 0, 0])
        self.assertEqual(int(padded.length), 1)

    def test_rejects_inconsistent_lengths(self):
        with self.assertRaises(ValueError):
            pad_trajectory(np.zeros((3, 2)), np.array([1]), np.array([-1.0]), False, horizon=3)
        with self.assertRaises(ValueError):
            pad_trajectory(np.zeros((2, 2)), np.array([7]), np.array([-1.0]), False, horizon=3)


if __name__ == "__main__":
    unittest.main()
