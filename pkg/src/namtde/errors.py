"""Exception taxonomy shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition or a type invariant."""


class NumericInputError(ValueError):
    """Non-finite or otherwise numerically invalid data reached a kernel."""


class TransportError(RuntimeError):
    """A remote captioner could not be reached within the retry budget."""


class ProtocolError(RuntimeError):
    """A remote captioner answered with a malformed body."""


class FormatError(RuntimeError):
    """A file has the wrong magic, version, or schema."""


class CorruptionError(RuntimeError):
    """A file failed its checksum or is truncated."""
