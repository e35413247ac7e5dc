"""Exception types raised across the package."""


class BcosError(Exception):
    """Base class for all package errors."""


class ShapeError(BcosError, ValueError):
    """Incompatible tensor shapes or geometry; ``shapes`` holds the offenders."""

    def __init__(self, message, *shapes):
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class DegenerateWeightError(BcosError, ValueError):
    """A weight row (or kernel slice) has near-zero norm and cannot be normalized."""

    def __init__(self, row, norm):
        super().__init__(f"weight row {row} has norm {norm:.3e} < 1e-12 (dead initialization?)")
        self.row = row
        self.norm = norm


class EncodingRangeError(BcosError, ValueError):
    """Pixel values outside [0, 1] passed to the six-channel encoder."""


class TargetError(BcosError, ValueError):
    """Invalid explanation target (layer, neuron, class)."""


class CheckpointError(BcosError):
    pass


class CheckpointVersionError(CheckpointError):
    """Bad magic, unsupported version or inconsistent metadata."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class DatasetError(BcosError):
    """Missing or malformed dataset files."""


class NaNLossError(BcosError, FloatingPointError):
    def __init__(self, message, tensor_name=None, step=None):
        super().__init__(message)
        self.tensor_name = tensor_name
        self.step = step


class GridError(BcosError, ValueError):
    """Not enough classes or images to build the requested grids."""


class ConfigError(BcosError, ValueError):
    pass
