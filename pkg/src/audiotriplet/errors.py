"""Exception types shared across the pipeline.

Everything raised deliberately by this package derives from PipelineError.
Bad inputs (files, configs, shapes, protocol preconditions) derive from
DataError; numerical blow-ups during optimisation derive from
DivergenceError. The CLI maps DataError to exit code 2 and DivergenceError
to exit code 3.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class DataError(PipelineError):
    """Invalid input data, file format, configuration, or protocol precondition."""


class WavParseError(DataError):
    """Malformed RIFF/WAVE container; the message names the offending chunk."""


class UnsupportedWavError(DataError):
    """Well-formed WAV that uses an encoding outside 16-bit PCM mono/stereo."""


class WriteError(DataError):
    """An output file could not be written; the message names the path."""


class ValidationError(DataError):
    """A manifest, config, or table violates its documented invariants."""


class TooShortError(DataError):
    """Input with fewer samples or frames than the operation requires."""

    def __init__(self, message: str, required: int | None = None, actual: int | None = None):
        super().__init__(message)
        self.required = required
        self.actual = actual


class ShapeError(DataError):
    """Tensor shapes incompatible with an operation; names the op and shapes."""


class ContractError(DataError):
    """An API contract violated by the caller (e.g. non-scalar loss, empty triples)."""


class SamplingError(DataError):
    """The corpus cannot supply the requested batch composition."""


class MiningError(DataError):
    """The batch grouping admits no valid triplets."""


class FileFormatError(DataError):
    """A binary artifact (feature cache, checkpoint) has an invalid layout."""


class CheckpointFormatError(FileFormatError):
    """Checkpoint magic, version, or header inconsistent with this format."""


class CheckpointCorruptError(FileFormatError):
    """Checkpoint payload truncated or oversized; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class DegenerateFitError(DataError):
    """A classifier fit was asked to run on degenerate data (e.g. one class)."""


class SingularCovarianceError(DataError):
    """A covariance factorisation failed; suggests increasing shrinkage."""


class ProtocolError(DataError):
    """An evaluation protocol cannot be run on the given data."""


class RankDeficiencyError(DataError):
    """A regression design matrix is rank deficient; names collinear columns."""


class UsageError(PipelineError):
    """Bad command-line arguments. Mapped to exit code 1."""


class DivergenceError(PipelineError):
    """Optimisation produced non-finite values. Mapped to exit code 3."""

    def __init__(self, message: str, step: int | None = None, learning_rate: float | None = None):
        super().__init__(message)
        self.step = step
        self.learning_rate = learning_rate
