"""Exception hierarchy shared across the package."""


class DknError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DknError, ValueError):
    """Tensor shapes do not line up for an operation."""


class ConfigurationError(DknError, ValueError):
    """An operation or model was configured with unusable settings."""


class ContractError(DknError, RuntimeError):
    """A documented pre- or post-condition was violated."""


class TrainingDivergedError(DknError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, iteration, last_finite_loss):
        self.iteration = iteration
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at iteration {iteration} "
            f"(last finite loss: {last_finite_loss})"
        )


class CheckpointError(DknError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ImageFormatError(DknError, ValueError):
    """Base class for image decoding failures."""


class MalformedHeaderError(ImageFormatError):
    pass


class UnexpectedEOFError(ImageFormatError):
    pass


class UnsupportedMaxvalError(ImageFormatError):
    pass
