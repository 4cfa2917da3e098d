"""Exception hierarchy.

Every error raised on purpose by the package derives from ``MotlpError`` so the
command line can map domain failures to exit code 1.
"""


class MotlpError(Exception):
    """Base class for domain errors."""


class EmptyMeasure(MotlpError):
    pass


class InvalidMeasure(MotlpError):
    pass


class DimensionMismatch(MotlpError):
    pass


class ZeroMass(MotlpError):
    pass


class NegativeResidual(MotlpError):
    pass


class MissingOracle(MotlpError):
    pass


class SamplerFailure(MotlpError):
    pass


class InvalidCase(MotlpError):
    pass


class SizeCap(MotlpError):
    pass


class IterationLimit(MotlpError):
    pass


class NotOptimal(MotlpError):
    pass


class IOFailure(MotlpError):
    pass
