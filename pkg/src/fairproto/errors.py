"""Exception types shared across the pipeline.

The CLI maps these onto its stable exit codes: usage problems exit 2,
data/format/capacity problems exit 3, numeric problems exit 4.
"""


class FairprotoError(Exception):
    """Base class for every error raised by this package."""


class FormatError(FairprotoError):
    """Byte stream is not a file of the expected format (magic/version/layout)."""


class CorruptionError(FairprotoError):
    """Stream ended or became inconsistent mid-parse; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ValidationError(FairprotoError):
    """A structural invariant does not hold for a record, manifest, or argument."""


class CapacityError(FairprotoError):
    """A split or class holds too few samples for the requested protocol."""


class ShapeError(FairprotoError):
    """Tensor dimensions do not match between layers, inputs, or checkpoints."""


class NumericError(FairprotoError):
    """Non-finite values showed up where finite arithmetic is required."""


class SinkError(FairprotoError):
    """Writing to a byte sink failed; carries how many bytes made it out."""

    def __init__(self, message: str, bytes_written: int):
        super().__init__(f"{message} ({bytes_written} bytes written before failure)")
        self.bytes_written = bytes_written
