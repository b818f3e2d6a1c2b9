"""Exception hierarchy.

Every error raised by the package derives from :class:`ESDCError`.  The
intermediate classes group errors by the layer that raises them so callers
(notably the CLI) can map them onto exit codes.
"""


class ESDCError(Exception):
    """Base class for all package errors."""


class ValidationError(ESDCError, ValueError):
    """A value violates a data-model invariant."""


class TooFewCoordinates(ValidationError):
    pass


class NonMonotonic(ValidationError):
    pass


class IrregularSpacingDeclaredRegular(ValidationError):
    pass


class UnknownDimension(ValidationError, KeyError):
    def __str__(self):
        return ValueError.__str__(self)


class EmptySelection(ValidationError):
    pass


class MalformedRecord(ValidationError):
    pass


class StoreError(ESDCError):
    """Chunk-store failures."""


class IoFailure(StoreError, OSError):
    pass


class UnsupportedDtype(StoreError, TypeError):
    pass


class MissingMetadata(StoreError, FileNotFoundError):
    pass


class CorruptChunk(StoreError):
    pass


class OutOfBounds(StoreError, IndexError):
    pass


class CubingError(ESDCError):
    pass


class MissingSpatialDims(CubingError):
    pass


class ConservativeOnIrregularGrid(CubingError):
    pass


class TargetFinerThanSource(CubingError):
    pass


class NonTemporalCube(CubingError):
    pass


class DuplicateVariableName(CubingError):
    pass


class IncompatibleUnits(CubingError):
    pass


class HarmoniseError(ESDCError):
    pass


class NonPositiveStep(HarmoniseError):
    pass


class IrregularTimeGrid(HarmoniseError):
    pass


class SpanTooShort(HarmoniseError):
    pass


class GridMismatch(HarmoniseError):
    pass


class GapsPresent(HarmoniseError):
    pass


class WindowTooLarge(HarmoniseError):
    pass


class ParseError(HarmoniseError):
    """Expression syntax error; ``position`` is the 0-based character offset."""

    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownVariable(HarmoniseError):
    pass


class DuplicateName(HarmoniseError):
    pass


class StatsError(ESDCError):
    pass


class IrregularLatGrid(StatsError):
    pass


class NonPositiveWeight(StatsError, ValueError):
    pass


class FewerThanTwoComplete(StatsError):
    pass


class EngineError(ESDCError):
    pass


class ShapeMismatch(EngineError):
    def __init__(self, message, loop_index=None):
        super().__init__(message)
        self.loop_index = loop_index


class BudgetTooSmall(EngineError):
    pass


class SamplingError(ESDCError):
    pass


class NotEnoughEligibleCells(SamplingError):
    pass


class FewerBlocksThanFolds(SamplingError):
    pass


class NonAnomalyInput(SamplingError):
    pass


class WindowExceedsDomain(SamplingError):
    pass


class CLIError(ESDCError):
    pass


class UnknownPreset(CLIError):
    pass


class IndexOutOfRange(CLIError, IndexError):
    pass
