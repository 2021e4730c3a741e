class NearIDError(Exception):
    """Base class for all toolkit errors."""


class ZeroVectorError(NearIDError):
    pass


class DimensionMismatchError(NearIDError):
    pass


class EmptyInputError(NearIDError):
    pass


class NoValidPositiveError(NearIDError):
    """An anchor row has no valid positive slot."""


class EmptyNegativePoolError(NearIDError):
    """The batch-negative pool of an anchor is empty (batch too small for the rank term)."""


class DegeneratePrototypeError(NearIDError):
    pass


class MissingOracleError(NearIDError):
    pass


class StaleCacheError(NearIDError):
    """A forward cache was already consumed by a backward pass."""


class InvalidScheduleError(NearIDError):
    pass


class NonFiniteGradientError(NearIDError):
    def __init__(self, block: str):
        super().__init__(f"Non-finite gradient in parameter block '{block}'")
        self.block = block


class TrainingDivergedError(NearIDError):
    def __init__(self, step: int, value: float):
        super().__init__(f"Loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value


class ConfigError(NearIDError):
    pass


class EmptyRecordsError(NearIDError):
    pass


class ConstantSeriesError(NearIDError):
    pass


class BadAreasError(NearIDError):
    pass


class NoValidGroupsError(NearIDError):
    pass


class InsufficientPointsError(NearIDError):
    pass


class FileFormatError(NearIDError):
    pass


class MissingSplitError(NearIDError):
    pass
