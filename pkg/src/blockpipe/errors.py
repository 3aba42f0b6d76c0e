"""Exception types shared across the package."""


class BlockPipeError(Exception):
    """Base class for every package-specific error."""


class CycleError(BlockPipeError):
    """The task graph contains a directed cycle (a self-edge counts)."""


class UnknownTaskError(BlockPipeError):
    """A task id was referenced that the graph or model does not declare."""


class DuplicateEdgeError(BlockPipeError):
    """The same directed edge was declared more than once."""


class DimensionError(BlockPipeError):
    """A matrix/layout dimension is inconsistent with its declared shape."""


class UnknownLinkError(BlockPipeError):
    """A device or device-to-device link is missing from the cost model."""


class UnknownLayerError(BlockPipeError):
    """A layer index falls outside the cost model's layer table."""


class InvalidGroupingError(BlockPipeError):
    """A device grouping or layer partition violates its structural rules."""


class InfeasibleError(BlockPipeError):
    """The search space contains no candidate satisfying the constraints."""
