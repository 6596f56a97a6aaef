"""Exception types shared across the package."""


class AcopfError(Exception):
    """Base class for all errors raised by this package."""


# ---- case parsing / network validation ----

class MissingSection(AcopfError):
    """A required table is absent from the case file."""


class UnsupportedCost(AcopfError):
    """Generator cost is piecewise linear or has degree above two."""


class DanglingReference(AcopfError):
    """A branch or generator row refers to an unknown bus."""


class NoReferenceBus(AcopfError):
    """The case has no bus marked as reference (or more than one)."""


class DegenerateImpedance(AcopfError):
    """A branch has r == 0 and x == 0."""


class DimensionMismatch(AcopfError):
    """Array lengths disagree with the network dimensions."""


class NonpositiveMagnitude(AcopfError):
    """A voltage magnitude bound is not strictly positive."""


class InvertedBounds(AcopfError):
    """A lower bound exceeds the matching upper bound."""


# ---- state conversion ----

class ZeroVoltage(AcopfError):
    """Rectangular voltage is at the origin; the angle is undefined."""


# ---- boxes / branch-and-bound ----

class EmptyBox(AcopfError):
    """A variable box has lo > hi."""


class EmptyBoxDetected(AcopfError):
    """Bound tightening proved the box contains no feasible point."""


class InfeasibleNode(AcopfError):
    """A node relaxation is infeasible."""


class NoBranchCandidate(AcopfError):
    """Every lifted product already matches its factors; nothing to split."""


# ---- historical data ----

class EmptyDataset(AcopfError):
    """The dataset holds no entries."""


class KTooLarge(AcopfError):
    """Requested more neighbours than the dataset holds."""


class FingerprintMismatch(AcopfError):
    """Dataset was built for a different network."""


class SchemaVersion(AcopfError):
    """Dataset file schema is not the supported version."""


# ---- benchmark harness ----

class AllLabelingFailed(AcopfError):
    """No solver produced a usable solution for a training instance."""


class InsufficientEntries(AcopfError):
    """Not enough entries to perform the requested split."""


class EmptyReportSet(AcopfError):
    """No result rows to aggregate."""
