"""Exception types shared across the toolkit."""


class SpineRegError(Exception):
    """Base class for all toolkit errors."""


class MeshParseError(SpineRegError):
    """A mesh or cloud file could not be parsed.

    Carries the byte offset at which parsing failed so broken files can
    be inspected directly.
    """

    def __init__(self, path, byte_offset, message):
        self.path = str(path)
        self.byte_offset = int(byte_offset)
        super().__init__(f"{self.path}: byte {self.byte_offset}: {message}")


class UnsupportedFormatError(SpineRegError):
    """File extension or magic bytes do not match a supported format."""


class DegenerateGeometryError(SpineRegError):
    """Input geometry is rank-deficient (collinear points, empty mesh, ...)."""


class DimensionMismatchError(SpineRegError):
    """Pose or parameter vector does not match the model's dimensions."""


class OptimizationError(SpineRegError):
    """The pose optimizer hit a non-finite objective or invalid state."""


class StaleReferenceError(SpineRegError):
    """A label references a data file whose content hash no longer matches."""
