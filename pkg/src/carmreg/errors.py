"""Exception hierarchy. Every error raised on purpose by carmreg derives from
:class:`CarmRegError` so the CLI can map it to a runtime exit code."""


class CarmRegError(Exception):
    pass


class InvalidPose(CarmRegError, ValueError):
    pass


class BehindSource(CarmRegError, ValueError):
    pass


class FormatError(CarmRegError, ValueError):
    pass


class SizeMismatch(CarmRegError, ValueError):
    pass


class SpecError(CarmRegError, ValueError):
    pass


class TooSmall(CarmRegError, ValueError):
    pass


class DegenerateInput(CarmRegError, ValueError):
    pass


class BadBracket(CarmRegError, ValueError):
    pass


class NonFiniteObjective(CarmRegError, ArithmeticError):
    pass


class ShapeMismatch(CarmRegError, ValueError):
    pass


class SamplingError(CarmRegError, RuntimeError):
    pass


class EmptyLandmarks(CarmRegError, ValueError):
    pass


class EmptyInput(CarmRegError, ValueError):
    pass
