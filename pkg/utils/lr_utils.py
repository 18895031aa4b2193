from typing import TYPE_CHECKING

import optax

if TYPE_CHECKING:
    from utils.source_training import SourceTrainingConfig

SUPPORTED_SCHEDULES = ("constant", "cos", "wsd")


def get_lr_schedule(config: "SourceTrainingConfig") -> optax.Schedule:
    """Step size per source-training iteration.

    `cos` warms up linearly and decays along a cosine over the whole run;
    `wsd` warms up, holds max_lr, then decays linearly over the last
    wsd_decay_steps iterations.
    """
    total, warmup = config.max_iterations, config.warmup_steps
    if config.lr_schedule == "constant":
        return optax.constant_schedule(config.max_lr)
    if config.lr_schedule == "cos":
        if warmup > total:
            raise ValueError(f"warmup_steps ({warmup}) exceeds max_iterations ({total}).")
        return optax.warmup_cosine_decay_schedule(
            config.init_lr, config.max_lr, warmup, total, config.decay_end
        )
    if config.lr_schedule == "wsd":
        decay = config.wsd_decay_steps
        if warmup + decay > total:
            raise ValueError(f"warmup_steps + wsd_decay_steps ({warmup + decay}) exceeds max_iterations ({total}).")
        return optax.join_schedules(
            [
                optax.linear_schedule(config.init_lr, config.max_lr, warmup),
                optax.constant_schedule(config.max_lr),
                optax.linear_schedule(config.max_lr, config.decay_end, decay),
            ],
            [warmup, total - decay],
        )
    raise ValueError(f"Unknown lr_schedule {config.lr_schedule!r}, use one of {SUPPORTED_SCHEDULES}")
