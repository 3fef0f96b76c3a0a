"""
Exception hierarchy for the saliency toolkit.

Every error carries the process exit code the CLI reports for it,
the same way HTTP handlers in a service map failures to status codes.
"""

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INTERNAL = 2


class SaliencyError(Exception):
    """Base class for all toolkit errors"""

    exit_code = EXIT_INTERNAL

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InvalidInputError(SaliencyError):
    """
    Bad arguments or a violated pre-condition.

    Not a ValueError, so it passes through pydantic validators unwrapped.
    """

    exit_code = EXIT_INVALID


class ShapeMismatchError(InvalidInputError):
    pass


class NotADistributionError(InvalidInputError):
    pass


class EmptyFixationsError(InvalidInputError):
    pass


class UndefinedMetricError(InvalidInputError):
    """Metric is undefined for the input (e.g. CC of a constant map)"""


class FormatError(InvalidInputError):
    """Malformed PFM, CSV, checkpoint or manifest file"""


class TrainingDivergedError(SaliencyError):
    """Loss became non-finite during training"""

    exit_code = EXIT_INTERNAL
