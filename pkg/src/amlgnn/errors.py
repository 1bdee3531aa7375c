"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to pick an exit code:
``usage`` -> 2, ``data`` -> 3, ``numeric`` -> 4, anything else -> 1.
"""


class AmlgnnError(Exception):
    category = "internal"


class UsageError(AmlgnnError):
    category = "usage"


class DataError(AmlgnnError):
    category = "data"


class NumericError(AmlgnnError):
    category = "numeric"


# graph store
class MalformedCsv(DataError):
    pass


class UnknownTxId(DataError):
    pass


class EmptyGraph(DataError):
    pass


class BadPartition(DataError):
    pass


class BadFraction(DataError):
    pass


class CacheFormatError(DataError):
    pass


# autodiff
class ShapeMismatch(DataError):
    pass


class InvalidProbability(DataError):
    pass


class NotScalar(AmlgnnError):
    pass


# layers / model assembly
class BadShape(DataError):
    pass


class UnknownAggregator(DataError):
    pass


class ConfigOutOfRange(DataError):
    pass


# training
class EmptyMask(DataError):
    pass


class UnlabeledInMask(DataError):
    pass


class SingleClassMask(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


# evaluation
class NoPositives(DataError):
    pass


class SingleClass(DataError):
    pass


class DegenerateSet(NumericError):
    pass


# search
class BadSchedule(DataError):
    pass
