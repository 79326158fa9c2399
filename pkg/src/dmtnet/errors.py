"""Exception types raised across the pipeline."""


class DMTError(Exception):
    """Base class for all pipeline errors."""


class SingularPrototypeMatrix(DMTError):
    pass


class MalformedHeader(DMTError):
    pass


class TruncatedPayload(DMTError):
    pass


class DimensionMismatch(DMTError):
    pass


class ShapeMismatch(DMTError):
    pass


class EmptyMask(DMTError):
    pass


class NoValidPrototypes(DMTError):
    pass


class ZeroPrototype(DMTError):
    pass


class StaleCache(DMTError):
    pass


class NonFiniteLoss(DMTError):
    pass


class InsufficientData(DMTError):
    pass


class ConfigError(DMTError):
    pass
