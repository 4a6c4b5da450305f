"""Exception hierarchy shared by the whole package.

CLI exit codes map onto these: any SegcycleError exits 1, OS-level I/O
failures exit 2.
"""


class SegcycleError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SegcycleError):
    """Input data or configuration violates a documented invariant."""


class FormatError(SegcycleError):
    """A serialized file or byte stream is structurally malformed."""


class ManifestError(ValidationError):
    """A dataset manifest fails schema or consistency checks."""


class ContractError(ValidationError):
    """A pluggable component (e.g. a segmenter) broke its interface contract."""
