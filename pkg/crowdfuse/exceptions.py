class CrowdfuseError(Exception):
    pass


class InputError(CrowdfuseError, ValueError):
    """Malformed or inconsistent input. The CLI maps it to exit code 2."""


class NumericalError(CrowdfuseError, ArithmeticError):
    """A numerical procedure failed. The CLI maps it to exit code 3."""


class NegativeEntryError(InputError):
    pass


class SupportMismatchError(InputError):
    pass


class EmptyInputError(InputError):
    pass


class DimensionMismatchError(InputError):
    pass


class InvalidParamsError(InputError):
    pass


class AllZeroWeightsError(InputError):
    pass


class NotBinaryError(InputError):
    pass


class EmptyItemError(InputError):
    pass


class InsufficientPairsError(InputError):
    pass


class UncoveredAnnotatorError(InputError):
    pass


class EmptyGroupError(InputError):
    pass


class LengthMismatchError(InputError):
    pass


class InsufficientPointsError(InputError):
    pass


class NonPositiveError(InputError):
    pass


class MalformedInputError(InputError):
    pass


class NoConvergenceError(NumericalError):
    pass


class AnchorDegenerateError(NumericalError):
    pass


class NumericUnderflowError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace
