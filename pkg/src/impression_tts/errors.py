"""Exception types shared across the package."""


class ImpressionError(Exception):
    """Base class for all package errors."""


class MissingRatings(ImpressionError):
    pass


class InvalidRating(ImpressionError):
    pass


class ZeroVariance(ImpressionError):
    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class InsufficientData(ImpressionError):
    pass


class InvalidDelta(ImpressionError):
    pass


class EmptyContent(ImpressionError):
    pass


class InsufficientSpeakers(ImpressionError):
    pass


class EmptySequence(ImpressionError):
    pass


class ShapeError(ImpressionError):
    pass


class NotInitialized(ImpressionError):
    pass


class StageOrderViolation(ImpressionError):
    pass


class SplitLeakage(ImpressionError):
    pass


class EmptyTarget(ImpressionError):
    pass


class MalformedResponse(ImpressionError):
    pass


class MissingDimension(ImpressionError):
    def __init__(self, key: str):
        super().__init__(f"response is missing dimension {key!r}")
        self.key = key


class MappingFailed(ImpressionError):
    def __init__(self, message: str, last_response: str | None = None, trace=None):
        super().__init__(message)
        self.last_response = last_response
        self.trace = trace


class ConfigError(ImpressionError):
    pass
