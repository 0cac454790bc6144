"""Exception hierarchy shared across the package."""


class MividError(Exception):
    """Base class for all package errors."""


class ConfigError(MividError):
    pass


class DataError(MividError):
    pass


class StepError(MividError):
    """Diffusion timestep outside ``1..T_d``."""


class ShapeError(MividError):
    pass


class NumericError(MividError):
    """A loss, gradient or parameter became non-finite."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class MetricError(MividError):
    pass


class CheckpointError(MividError):
    pass
