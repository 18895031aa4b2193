"""Experiment configuration: a nested dataclass tree stored as YAML.

Entry scripts parse an `Args` dataclass with tyro. When `--config PATH` is
given, the file supplies the defaults and any dotted flag overrides them.
"""

from dataclasses import dataclass, field, fields, is_dataclass, replace
import logging
import math
import os
import sys
import typing
from typing import Any, Callable, Literal

import tyro
import yaml

from tvd import TvDConfig
from utils.divergences import DivergenceError
from utils.gridworld import GridWorldSpec, StateTransform
from utils.oracles import OracleLimitError
from utils.source_training import REGIMES, RegimeError, SourceTrainingConfig

logger = logging.getLogger(__name__)

CONFIG_VERSION = 2
OUTPUT_DIR_ENV = "TVD_OUTPUT_DIR"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    """Usage or configuration error; entry scripts exit with code 2."""


@dataclass(frozen=True)
class TransformConfig:
    """Target-domain transform; `center` of None rotates about the grid center."""

    kind: Literal["identity", "rotation"] = "rotation"
    angle: float = math.pi / 2
    center: tuple[float, float] | None = None

    def build(self, spec: GridWorldSpec) -> StateTransform:
        center = spec.center if self.center is None else tuple(float(c) for c in self.center)
        if self.kind == "identity":
            return StateTransform(center=center)
        return StateTransform(kind="rotation", angle=float(self.angle), center=center)


@dataclass(frozen=True)
class ExperimentConfig:
    gridworld: GridWorldSpec = field(default_factory=GridWorldSpec)
    transform: TransformConfig = field(default_factory=TransformConfig)
    source_regime: Literal[
        "low_entropy_optimal", "high_entropy_optimal", "high_entropy_suboptimal"
    ] = "high_entropy_optimal"
    training: SourceTrainingConfig = field(default_factory=SourceTrainingConfig)
    tvd: TvDConfig = field(default_factory=TvDConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.source_regime not in REGIMES:
            raise ValueError(f"Unknown source regime {self.source_regime!r}, use one of {REGIMES}")
        if self.version != CONFIG_VERSION:
            raise ValueError(f"Config version {self.version} is not supported.")

    @property
    def divergence(self):
        return self.tvd.divergence

    @property
    def state_transform(self) -> StateTransform:
        return self.transform.build(self.gridworld)

    def resolved_tvd(self) -> TvDConfig:
        """TvD settings with the master seed applied."""
        return replace(self.tvd, seed=self.seed)


def _to_plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (tuple, list)):
        return [_to_plain(v) for v in value]
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _to_plain(config)


def _from_dict(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}.")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) {', '.join(f'{path}{k}' for k in unknown)}.")
    kwargs = {}
    for name, value in data.items():
        field_type = hints[name]
        if is_dataclass(field_type):
            kwargs[name] = _from_dict(field_type, value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {path.rstrip('.') or 'config'}: {e}") from e


def _migrate(data: dict) -> dict:
    """Upgrades older layouts; version 1 had a flat `cost_mode` key and no version."""
    version = data.get("version", 1)
    if version == CONFIG_VERSION:
        return data
    if version != 1:
        raise ConfigError(f"Config version {version} is not supported (expected {CONFIG_VERSION}).")
    data = dict(data)
    tvd = dict(data.get("tvd", {}))
    divergence = dict(tvd.get("divergence", {}))
    if "cost_mode" in divergence:
        divergence["cost"] = {"mode": divergence.pop("cost_mode")}
    tvd["divergence"] = divergence
    data["tvd"] = tvd
    data["version"] = CONFIG_VERSION
    logger.info("Migrated config from version 1 to %d", CONFIG_VERSION)
    return data


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("The config file must hold a mapping.")
    return _from_dict(ExperimentConfig, _migrate(data), "")


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"Config file {path} does not exist.")
    with open(path) as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse {path}: {e}") from e
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=False)


def _peek_config_path(argv: list[str]) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


ArgsT = typing.TypeVar("ArgsT")


def parse_args(args_type: type[ArgsT], argv: list[str] | None = None) -> ArgsT:
    """tyro parsing with config-file defaults and the output-dir environment override.

    `args_type` must have `config: str | None` and `experiment: ExperimentConfig` fields.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    config_path = _peek_config_path(argv)
    default = args_type()
    if config_path is not None:
        default = replace(default, config=config_path, experiment=load_config(config_path))
    args = tyro.cli(args_type, args=argv, default=default)
    output_dir = os.environ.get(OUTPUT_DIR_ENV)
    if output_dir:
        args = replace(args, experiment=replace(args.experiment, output_dir=output_dir))
    return args


def run_cli(main: Callable[[], None]) -> None:
    """Runs an entry point and exits with 0 on success, 1 on runtime failure, 2 on usage errors."""
    try:
        main()
    except (ConfigError, OracleLimitError, FileNotFoundError) as e:
        logger.error("%s", e)
        sys.exit(EXIT_USAGE)
    except (RegimeError, DivergenceError) as e:
        logger.error("%s", e)
        sys.exit(EXIT_FAILURE)
    except Exception:
        logger.exception("Unhandled error")
        sys.exit(EXIT_FAILURE)
    sys.exit(EXIT_OK)
