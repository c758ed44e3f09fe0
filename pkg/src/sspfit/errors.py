"""Exception types shared across the package."""


class SSPError(Exception):
    """Base class for all errors raised by sspfit."""


class ParseError(SSPError):
    pass


class EmptyCloud(SSPError):
    pass


class DimensionMismatch(SSPError):
    pass


class DegenerateExtent(SSPError):
    pass


class InsufficientNeighbors(SSPError):
    pass


class NonPositiveDensity(SSPError):
    pass


class OutOfRange(SSPError):
    pass


class NonFiniteParameters(SSPError):
    pass


class NonFiniteLoss(SSPError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class NonFiniteGradient(SSPError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class InapplicableVoxel(SSPError):
    pass


class ZeroAreaMesh(SSPError):
    pass


class EmptySet(SSPError):
    pass


class ConfigError(SSPError):
    pass
