import logging

from jax.tree_util import tree_leaves

logger = logging.getLogger(__name__)


def _count_component(component_params) -> int:
    return sum(int(getattr(leaf, "size", 0)) for leaf in tree_leaves(component_params))


def count_parameters_by_component(params: dict) -> dict[str, int]:
    """Parameter count of every top-level entry (omega, theta, potentials, ...) and the total."""
    logger.debug("Counting components %s", sorted(params))
    counts = {name: _count_component(params[name]) for name in sorted(params)}
    counts["total"] = sum(counts.values())
    return counts
