"""Exception types shared across the package."""


class LayerDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(LayerDiffError):
    """Invalid configuration value (schedule length, t0, K, sweep axis...)."""


class DimensionError(LayerDiffError):
    """Array shapes inconsistent with the render resolution."""


class SchedulingError(LayerDiffError):
    """Timestep not on the sampling grid, or used in the wrong section."""


class ConditionError(LayerDiffError):
    """A token sequence selects an empty template subset."""


class CapabilityError(LayerDiffError):
    """An estimator lacks a required capability (e.g. attention maps)."""


class GuidanceError(LayerDiffError):
    """Invalid vision-guidance construction (null mode, empty position set)."""


class FusionError(LayerDiffError):
    """Zero mask coverage at some pixel during layer fusion."""


class LayoutError(LayerDiffError):
    """Degenerate or out-of-range layout entity (box, mask)."""


class TrainingError(LayerDiffError):
    """Toy-network training diverged or failed a sanity check."""
