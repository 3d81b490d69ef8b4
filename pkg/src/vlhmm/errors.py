"""Exception hierarchy shared by all vlhmm modules."""


class VLHMMError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgs(VLHMMError, ValueError):
    pass


class BudgetExceeded(VLHMMError):
    """An enumeration or state-space size exceeds its configured cap."""


# tree
class PastTooShort(VLHMMError, ValueError):
    pass


class MalformedTree(VLHMMError, ValueError):
    pass


class TreePropertyViolation(MalformedTree):
    pass


class NotMaximalNode(VLHMMError, ValueError):
    pass


class NotAPermutation(VLHMMError, ValueError):
    pass


class AlphabetMismatch(VLHMMError, ValueError):
    pass


# vlmc
class NotASubtree(VLHMMError, ValueError):
    pass


class DepthTooSmall(VLHMMError, ValueError):
    pass


class NotIrreducible(VLHMMError):
    pass


# emissions
class DomainError(VLHMMError, ValueError):
    pass


class EmptyState(VLHMMError):
    pass


class DegenerateVariance(VLHMMError):
    pass


# inference
class StateCapExceeded(BudgetExceeded):
    pass


class NonFiniteInput(VLHMMError, ValueError):
    pass


class DegenerateClustering(VLHMMError):
    pass


# ktbound
class SequenceTooShort(VLHMMError, ValueError):
    pass


class PriorNotIntegrable(VLHMMError, ValueError):
    pass


# cli / io
class ConfigError(VLHMMError, ValueError):
    pass


class DataError(VLHMMError, ValueError):
    pass
