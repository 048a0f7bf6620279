"""Exception hierarchy shared by every module of the toolkit."""


class CubemapError(Exception):
    """Base class for all toolkit errors."""


class ParseError(CubemapError, ValueError):
    pass


class ValidationError(CubemapError, ValueError):
    pass


class DomainError(CubemapError, ValueError):
    """Input lies outside the domain of the operation (e.g. pixel outside the image)."""


class OutOfFovError(CubemapError, ValueError):
    pass


class NumericError(CubemapError, ArithmeticError):
    pass


class NoFaceError(CubemapError, ValueError):
    """Direction falls into the cone of an inactive (or no) cube face."""


class DegenerateError(CubemapError, ValueError):
    pass


class CrossFaceError(CubemapError, ValueError):
    """Predicted face of a landmark differs from the face it was measured on."""


class NoModelError(CubemapError, RuntimeError):
    pass


class AmbiguousError(CubemapError, RuntimeError):
    pass


class ConfigurationError(CubemapError, ValueError):
    pass


class InitializationError(CubemapError, RuntimeError):
    pass


class InsufficientDataError(CubemapError, ValueError):
    pass
