class CATFError(Exception):
    exit_code = 1


class ConfigError(CATFError):
    exit_code = 2


class DataError(CATFError):
    exit_code = 3


class IdxFormatError(DataError):
    def __init__(self, message, offset):
        super().__init__(f'{message} (at byte offset {offset})')
        self.offset = offset


class GenerationError(DataError):
    pass


class InvariantViolation(CATFError):
    exit_code = 4


class FrozenGradientError(InvariantViolation):
    pass


class ImmutabilityError(InvariantViolation):
    pass


class ProtocolError(InvariantViolation):
    pass


class CheckpointFormatError(CATFError):
    exit_code = 5


class MetricsFormatError(CATFError):
    exit_code = 6

    def __init__(self, message, line_no):
        super().__init__(f'line {line_no}: {message}')
        self.line_no = line_no


# Numerical and contract errors raised by the tensor core

class DimensionError(InvariantViolation):
    pass


class NumericError(InvariantViolation):
    pass


class ContractError(InvariantViolation):
    pass


class MissingNodeError(InvariantViolation):
    pass


class ThresholdDomainError(InvariantViolation):
    pass


class UnknownLayerError(InvariantViolation, LookupError):
    pass


class UnknownTaskError(InvariantViolation, LookupError):
    pass


class LabelRangeError(InvariantViolation, IndexError):
    pass
