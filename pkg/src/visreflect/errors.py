"""Exception types shared across the package.

Class names double as the typed error names reported by the CLI (stderr,
exit code 4) and the reward service (HTTP 422 body), so they are part of the
external contract and should not be renamed.
"""


class ReflectError(Exception):
    """Base class for all package errors."""


class TraceParseError(ReflectError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TraceValidationError(ReflectError):
    def __init__(self, field: str, constraint: str):
        super().__init__(f"{field}: {constraint}")
        self.field = field
        self.constraint = constraint


class MissingStep(ReflectError):
    pass


class MissingDistribution(ReflectError):
    pass


class AlignmentError(ReflectError, ValueError):
    pass


class DistributionError(ReflectError, ValueError):
    pass


class DegenerateAttention(ReflectError):
    """No strictly positive attention entry to average over."""


class DegenerateHalf(ReflectError):
    """One half of the response has no recorded steps."""


class EmptyInput(ReflectError):
    pass


class RewardInputError(ReflectError, ValueError):
    pass


class GenerationError(ReflectError, ValueError):
    pass


DEGENERATE_ERRORS = (DegenerateAttention, DegenerateHalf)
