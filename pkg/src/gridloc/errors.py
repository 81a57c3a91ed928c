class GridlocError(Exception):
    """Base class for user-facing errors."""


class ConfigError(GridlocError, ValueError):
    """Invalid or incomplete configuration."""


class DataError(GridlocError, ValueError):
    """Malformed input data or an impossible query against it."""


class ShapeError(GridlocError, ValueError):
    """Tensor shapes do not line up."""


class TrainingDivergence(GridlocError, RuntimeError):
    """Loss became non-finite during training."""
