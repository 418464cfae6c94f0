"""Exception hierarchy shared across the package."""


class PrimorlError(Exception):
    """Base class for all package-specific errors."""


class DomainError(PrimorlError, ValueError):
    """An input violates an operation's domain (non-finite, out of range)."""


class LayoutError(PrimorlError, ValueError):
    """Parameter/gradient layout mismatch."""


class NumericalError(PrimorlError, ArithmeticError):
    """Training produced a non-finite quantity; carries diagnostics."""


class ConfigError(PrimorlError, ValueError):
    """Invalid run configuration; message names the offending key."""


class DegenerateDatasetError(PrimorlError, ValueError):
    """Dataset too small for the requested operation."""


class AuditViolationError(PrimorlError, RuntimeError):
    """Private data was read during a phase that forbids it."""


class DatasetFormatError(PrimorlError, ValueError):
    """Container parse failure; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


class WrongKindError(DatasetFormatError):
    """Container holds a different artifact kind than requested."""
