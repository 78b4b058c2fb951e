"""Exception hierarchy.

Every error raised by the library derives from :class:`SCEError`. The
``category`` attribute groups errors for the command line exit codes.
"""


class SCEError(Exception):
    category = "estimation"


# data model
class DataError(SCEError):
    category = "data"


class EmptyDataset(DataError):
    pass


class NonBinaryColumn(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class DegenerateArm(DataError):
    pass


class MissingColumn(DataError):
    pass


class ParseFailure(DataError):
    pass


class DimensionMismatch(SCEError):
    category = "numerical"


# regression
class RankDeficient(SCEError):
    pass


class AllSameResponse(SCEError):
    pass


# estimators
class ZeroCompliance(SCEError):
    pass


class WeakFirstStage(SCEError):
    pass


class EmptySubgroup(SCEError):
    pass


class AllStrataDegenerate(SCEError):
    pass


class ReferenceFailed(SCEError):
    pass


class RegistryError(SCEError):
    category = "usage"


# resampling
class TooManyFailures(SCEError):
    pass


class CannotSplit(SCEError):
    pass


# synthesis / inference
class NumericalFailure(SCEError):
    category = "numerical"


class SingularT(NumericalFailure):
    pass


class DegenerateNormalization(NumericalFailure):
    pass


class InvalidAlpha(SCEError):
    category = "usage"


# simulation
class TooManyFailedReps(SCEError):
    category = "simulation"
