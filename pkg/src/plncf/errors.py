"""Exception types raised across the package."""


class PLNCFError(Exception):
    """Base class for all package errors."""


# dataset
class AllZeroBlock(PLNCFError, ValueError):
    pass


class NegativeEntry(PLNCFError, ValueError):
    pass


class ZeroVector(PLNCFError, ValueError):
    pass


class InsufficientUsers(PLNCFError, ValueError):
    pass


class SchemaError(PLNCFError, ValueError):
    pass


# splits
class TooFewInteractions(PLNCFError, ValueError):
    def __init__(self, user_id, count):
        super().__init__(f"user {user_id} has {count} interactions, need >= 3")
        self.user_id = user_id


class NoNegativesAvailable(PLNCFError, ValueError):
    pass


class InsufficientCandidates(PLNCFError, ValueError):
    pass


# models / training
class IndexOutOfRange(PLNCFError, IndexError):
    pass


class ShapeMismatch(PLNCFError, ValueError):
    pass


class InvalidSoftLabel(PLNCFError, ValueError):
    pass


# evaluation
class EmptyResults(PLNCFError, ValueError):
    pass


class TooFewSeeds(PLNCFError, ValueError):
    pass


class LengthMismatch(PLNCFError, ValueError):
    pass


class ZeroVariance(PLNCFError, ValueError):
    pass


# clustering / visualization
class TooFewPoints(PLNCFError, ValueError):
    pass


class SingleCluster(PLNCFError, ValueError):
    pass


class MissingCell(PLNCFError, KeyError):
    pass


class PerplexityTooHigh(PLNCFError, ValueError):
    pass


# driver
class MissingRuns(PLNCFError, RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        listing = ", ".join(self.missing[:20])
        more = "" if len(self.missing) <= 20 else f" (+{len(self.missing) - 20} more)"
        super().__init__(f"{len(self.missing)} runs missing: {listing}{more}")
