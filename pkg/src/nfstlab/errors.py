"""Shared exception types."""


class NfstError(Exception):
    """Base class for all package errors."""


class CyclicMachine(NfstError):
    """Raised when an operation requiring an acyclic machine meets a cycle."""


class LimitExceeded(NfstError):
    """Raised when an enumeration or subset construction exceeds its cap."""


class AmbiguousMarks(NfstError):
    """Raised when distinct alignments collide on one mark string in a way
    the lattice cannot represent (a final configuration with unemitted
    input/output progress)."""


class EmptyLanguage(NfstError):
    """Raised when a lattice is requested for a pair the machine cannot generate."""


class InvalidPath(NfstError):
    """Raised when a path is not a valid initial-to-final walk of its machine."""


class DataError(NfstError):
    """Raised on malformed corpus or serialization input."""


class DigestMismatch(NfstError):
    """Raised when artifacts trained against different scorer checkpoints are mixed."""
