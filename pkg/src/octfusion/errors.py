"""Exception hierarchy shared across the package."""


class OctFusionError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(OctFusionError, ValueError):
    pass


class DegenerateRange(OctFusionError, ValueError):
    pass


class PairMismatch(OctFusionError, ValueError):
    def __init__(self, field: str, left, right):
        self.field = field
        super().__init__(f"pair mismatch on {field}: {left!r} != {right!r}")


class ShapeMismatch(OctFusionError, ValueError):
    pass


class InvalidTarget(OctFusionError, ValueError):
    pass


class InvalidRatio(OctFusionError, ValueError):
    pass


class InvalidK(OctFusionError, ValueError):
    pass


class DimMismatch(OctFusionError, ValueError):
    pass


class MaskMismatch(OctFusionError, ValueError):
    pass


class IndexMismatch(OctFusionError, ValueError):
    pass


class NegativeWeight(OctFusionError, ValueError):
    pass


class MissingModality(OctFusionError, ValueError):
    pass


class InvalidSchedule(OctFusionError, ValueError):
    pass


class EmptyDataset(OctFusionError, ValueError):
    pass


class LabelOutOfRange(OctFusionError, ValueError):
    pass


class NonBinaryLabels(OctFusionError, ValueError):
    pass


class DegenerateLabels(OctFusionError, ValueError):
    pass


class NoPositives(OctFusionError, ValueError):
    pass


class EmptyGroup(OctFusionError, ValueError):
    pass


class TooFewPatients(OctFusionError, ValueError):
    pass


class SubsetTooLarge(OctFusionError, ValueError):
    pass


class InvalidPrevalence(OctFusionError, ValueError):
    pass


class MissingCheckpoint(OctFusionError, FileNotFoundError):
    pass


class CheckpointCorrupted(OctFusionError, ValueError):
    pass


class TaskNotFound(OctFusionError, KeyError):
    pass


class InvalidConfig(OctFusionError, ValueError):
    pass


class InvariantViolation(OctFusionError, AssertionError):
    """A runtime invariant check failed (CLI exits non-zero)."""
