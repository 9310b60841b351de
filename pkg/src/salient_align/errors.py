"""Exception types raised across the toolkit."""


class SalientAlignError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SalientAlignError, ValueError):
    """Input violates a documented invariant."""


# grid file I/O
class BadMagic(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class IoFailure(SalientAlignError, OSError):
    pass


# peaks
class DegenerateFit(SalientAlignError, ArithmeticError):
    """The log-intensity profile around a peak is not strictly concave."""


# clustering
class TooFewSamples(ValidationError):
    pass


class SingleCluster(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


# registration
class AmbiguousOrientation(SalientAlignError):
    """Landmarks are vertically aligned, so left/right ordering is undefined."""


class DegenerateLandmarks(ValidationError):
    pass


class SingularTransform(SalientAlignError, ArithmeticError):
    pass


# evaluation
class MissingAnnotation(SalientAlignError, KeyError):
    pass


class FlatImage(SalientAlignError, ArithmeticError):
    """Zero intensity variance; NCC is undefined."""


# synthesis
class BadParams(ValidationError):
    pass


class OutOfFrame(SalientAlignError):
    pass
