"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the CLI can map failures onto its
exit-code taxonomy: 1 for usage/IO problems, 2 for degenerate-but-handled
inputs, 3 for computation errors.
"""


class AirwayTopoError(Exception):
    exit_code = 3


# -- volume / IO ---------------------------------------------------------
class IoFailure(AirwayTopoError):
    exit_code = 1


class UnsupportedFormat(IoFailure):
    pass


class CorruptHeader(IoFailure):
    pass


class UnsupportedDatatype(IoFailure):
    pass


class DegenerateRange(AirwayTopoError):
    pass


class InvalidGrid(AirwayTopoError):
    pass


class DimMismatch(AirwayTopoError):
    pass


class InvalidParams(AirwayTopoError):
    exit_code = 1


# -- morphology / skeleton -----------------------------------------------
class EmptyMask(AirwayTopoError):
    exit_code = 2


class EmptyMaskWarning(UserWarning):
    """Raised through :mod:`warnings` when an operation yields no foreground."""


class EmptyTargetSet(AirwayTopoError):
    pass


# -- tree parsing --------------------------------------------------------
class DisconnectedSkeleton(AirwayTopoError):
    pass


class DegenerateSkeleton(AirwayTopoError):
    pass


class UngradedTree(AirwayTopoError):
    pass


class UnlabeledTree(AirwayTopoError):
    pass


class UnparsedTree(AirwayTopoError):
    pass


# -- metrics / losses ----------------------------------------------------
class OutOfRange(AirwayTopoError):
    pass


class EmptyCenterline(AirwayTopoError):
    pass


class SingularPoint(AirwayTopoError):
    pass


# -- sampling ------------------------------------------------------------
class EmptySet(AirwayTopoError):
    exit_code = 2


class InconsistentCounts(AirwayTopoError):
    pass


class PatchTooLarge(AirwayTopoError):
    exit_code = 1


# -- netshape ------------------------------------------------------------
class ShapeMismatch(AirwayTopoError):
    pass


class IndivisibleInput(AirwayTopoError):
    pass


# -- testkit -------------------------------------------------------------
class SpecDoesNotFit(AirwayTopoError):
    pass


class BranchNotFound(AirwayTopoError):
    pass


class GapTooLarge(AirwayTopoError):
    pass
