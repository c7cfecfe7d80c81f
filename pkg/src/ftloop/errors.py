"""Exception types raised across the package."""


class FtloopError(Exception):
    """Base class for every error raised by ftloop."""


class EmptyDataset(FtloopError):
    pass


class UnsupportedKind(FtloopError):
    pass


class TooShort(FtloopError):
    pass


class DuplicateId(FtloopError):
    pass


class QueryError(FtloopError):
    pass


class EmptyFailureSet(FtloopError):
    pass


class EmptyPassingSet(FtloopError):
    pass


class UnsupportedProbe(FtloopError):
    pass


class UnknownModel(FtloopError):
    pass


class BadFraction(FtloopError):
    pass


class NoCounterexample(FtloopError):
    pass


class EmptyReference(FtloopError):
    pass


class InfeasibleComposition(FtloopError):
    """Slice bands cannot be met with the given pools; ``constraint`` names the binding one."""

    def __init__(self, constraint: str):
        super().__init__(f"infeasible composition: {constraint}")
        self.constraint = constraint


class SearchExhausted(FtloopError):
    pass


class MenuExhausted(FtloopError):
    pass


class NeedTwoBranches(FtloopError):
    pass


class EmptyRegressionSet(FtloopError):
    pass


class BadProbability(FtloopError):
    pass


class UnknownVersion(FtloopError):
    pass


class NoFixableFailures(FtloopError):
    pass


class EmptyEvalSet(FtloopError):
    pass
