"""Channel pruning from randomly initialized weights."""

from ._core import (
    SpruneError,
    __version__,
    budget_epochs,
    correlation_matrix,
    count_flops,
    default_config,
    gated_widths,
    load_run,
    parse_cifar10,
    pearson,
    preset,
    preset_names,
    prune,
    prune_by_threshold,
    run_cli,
    search_structure,
    sparsity_penalty,
)

__all__ = [
    "SpruneError",
    "__version__",
    "budget_epochs",
    "correlation_matrix",
    "count_flops",
    "default_config",
    "gated_widths",
    "load_run",
    "parse_cifar10",
    "pearson",
    "preset",
    "preset_names",
    "prune",
    "prune_by_threshold",
    "run_cli",
    "search_structure",
    "sparsity_penalty",
]
