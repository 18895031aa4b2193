"""Parameter persistence.

Policy and potential checkpoints use a portable flat file: one JSON header
line followed by the parameters as little-endian float64 bytes. Full TvD
states go through an orbax CheckpointManager.
"""

import json
import os
from typing import Any

import flax.nnx as nnx
import jax
import numpy as np
import orbax.checkpoint as ocp

from models.policy import Policy
from models.undo_map import UndoMap
from utils.gridworld import GridWorldSpec
from utils.nn import Architecture

FLAT_FORMAT = "tvd-flat"
FLAT_FORMAT_VERSION = 1
_FLAT_DTYPE = np.dtype("<f8")


def save_flat(path: str, params: jax.Array | dict[str, jax.Array], header: dict) -> None:
    """Writes one or several named flat vectors; identical inputs give identical bytes."""
    parts = params if isinstance(params, dict) else {"params": params}
    names = sorted(parts)
    arrays = [np.asarray(parts[name], dtype=_FLAT_DTYPE).reshape(-1) for name in names]
    full_header = {
        **header,
        "format": FLAT_FORMAT,
        "version": FLAT_FORMAT_VERSION,
        "parts": {name: int(a.size) for name, a in zip(names, arrays)},
        "num_params": int(sum(a.size for a in arrays)),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(full_header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            f.write(a.tobytes())


def load_flat(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint {path} does not exist.")
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        payload = f.read()
    if header.get("format") != FLAT_FORMAT:
        raise ValueError(f"{path} is not a flat parameter checkpoint.")
    if header.get("version") != FLAT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {header.get('version')} in {path}.")
    flat = np.frombuffer(payload, dtype=_FLAT_DTYPE)
    if flat.size != header["num_params"]:
        raise ValueError(
            f"{path} holds {flat.size} parameters, header says {header['num_params']}."
        )
    parts, offset = {}, 0
    for name in sorted(header["parts"]):
        size = header["parts"][name]
        parts[name] = flat[offset : offset + size].copy()
        offset += size
    return header, parts


def save_policy(path: str, policy: Policy, theta: jax.Array, seed: int, **extra: Any) -> None:
    header = {
        "kind": "policy",
        "architecture": policy.architecture.to_dict(),
        "grid": _grid_header(policy.spec),
        "seed": int(seed),
        **extra,
    }
    save_flat(path, theta, header)


def load_policy(path: str) -> tuple[Policy, jax.Array, dict]:
    header, parts = load_flat(path)
    if header.get("kind") != "policy":
        raise ValueError(f"{path} is a {header.get('kind')!r} checkpoint, not a policy.")
    spec = _grid_from_header(header["grid"])
    architecture = Architecture.from_dict(header["architecture"])
    policy = Policy(
        spec,
        nnx.Rngs(int(header["seed"])),
        hidden_dims=architecture.hidden_dims,
        activation=architecture.activation,
    )
    theta = jax.numpy.asarray(parts["params"])
    if theta.size != policy.net.num_params:
        raise ValueError(
            f"{path} holds {theta.size} parameters, the architecture needs {policy.net.num_params}."
        )
    return policy, theta, header


def tree_to_record(tree) -> dict[str, np.ndarray]:
    """Flattens a pytree into a dict of numbered leaves."""
    leaves = jax.tree.leaves(tree)
    return {f"leaf_{i:05d}": np.asarray(leaf) for i, leaf in enumerate(leaves)}


def record_to_tree(record: dict[str, Any], template):
    """Inverse of tree_to_record, given any tree with the same structure."""
    treedef = jax.tree.structure(template)
    leaves = [np.asarray(record[key]) for key in sorted(record)]
    if len(leaves) != treedef.num_leaves:
        raise ValueError(
            f"Checkpoint holds {len(leaves)} leaves, expected {treedef.num_leaves}."
        )
    return jax.tree.unflatten(treedef, leaves)


def make_checkpoint_manager(directory: str, max_to_keep: int | None = 3) -> ocp.CheckpointManager:
    handler_registry = ocp.handlers.DefaultCheckpointHandlerRegistry()
    handler_registry.add(
        "tvd_state", ocp.args.PyTreeSave, ocp.handlers.PyTreeCheckpointHandler
    )
    handler_registry.add(
        "tvd_state", ocp.args.PyTreeRestore, ocp.handlers.PyTreeCheckpointHandler
    )
    checkpoint_options = ocp.CheckpointManagerOptions(
        max_to_keep=max_to_keep,
        step_format_fixed_length=6,
        cleanup_tmp_directories=True,
    )
    return ocp.CheckpointManager(
        os.path.abspath(directory),
        options=checkpoint_options,
        handler_registry=handler_registry,
    )


def save_tvd_state(manager: ocp.CheckpointManager, step: int, state) -> None:
    manager.save(
        step,
        args=ocp.args.Composite(
            tvd_state=ocp.args.PyTreeSave(tree_to_record(state)),  # type: ignore
        ),
        force=True,
    )
    manager.wait_until_finished()


def restore_tvd_state(manager: ocp.CheckpointManager, template, step: int | None = None):
    step = manager.latest_step() if step is None else step
    if step is None:
        raise FileNotFoundError(f"No TvD checkpoint found in {manager.directory}.")
    restored = manager.restore(
        step,
        args=ocp.args.Composite(tvd_state=ocp.args.PyTreeRestore()),  # type: ignore
    )
    return record_to_tree(restored["tvd_state"], template)


def _grid_header(spec: GridWorldSpec) -> dict:
    return {
        "width": spec.width,
        "height": spec.height,
        "start": list(spec.start),
        "goal": list(spec.goal),
        "horizon": spec.horizon,
        "step_reward": spec.step_reward,
    }


def _grid_from_header(grid: dict) -> GridWorldSpec:
    return GridWorldSpec(
        width=grid["width"],
        height=grid["height"],
        start=tuple(grid["start"]),
        goal=tuple(grid["goal"]),
        horizon=grid["horizon"],
        step_reward=grid["step_reward"],
    )


def save_undo_map(path: str, undo_map: UndoMap, omega: jax.Array, seed: int, **extra: Any) -> None:
    header = {
        "kind": "undo_map",
        "family": undo_map.family,
        "hidden_dims": list(undo_map.hidden_dims),
        "grid": _grid_header(undo_map.spec),
        "seed": int(seed),
        **extra,
    }
    save_flat(path, omega, header)


def load_undo_map(path: str) -> tuple[UndoMap, jax.Array, dict]:
    header, parts = load_flat(path)
    if header.get("kind") != "undo_map":
        raise ValueError(f"{path} is a {header.get('kind')!r} checkpoint, not an undo map.")
    undo_map = UndoMap(
        _grid_from_header(header["grid"]),
        header["family"],
        tuple(header["hidden_dims"]),
        nnx.Rngs(int(header["seed"])),
    )
    omega = jax.numpy.asarray(parts["params"])
    if omega.size != undo_map.num_params:
        raise ValueError(
            f"{path} holds {omega.size} parameters, the {undo_map.family} family needs {undo_map.num_params}."
        )
    return undo_map, omega, header


def save_potentials(path: str, potentials, params, kind: str, seed: int, **extra: Any) -> None:
    header = {
        "kind": "potentials",
        "divergence": kind,
        "architecture": potentials.architecture.to_dict(),
        "seed": int(seed),
        **extra,
    }
    save_flat(path, params, header)
