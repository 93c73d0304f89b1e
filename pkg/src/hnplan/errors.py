class HnplanError(Exception):
    """Base class for all package errors."""


class ExpertSynthesisFailed(HnplanError):
    pass


class DegenerateHeading(HnplanError):
    pass


class StandardizationMismatch(HnplanError):
    pass


class ShapeMismatch(HnplanError):
    pass


class _Divergence(HnplanError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class NonFiniteGradient(_Divergence):
    pass


class NonFiniteLoss(_Divergence):
    pass


class ConfigError(HnplanError):
    pass


class FormatError(HnplanError):
    pass
