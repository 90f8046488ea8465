"""Exception types shared across the package."""


class CamodiffError(Exception):
    """Base class for all camodiff errors."""


class ConfigurationError(CamodiffError):
    """A config value is out of range or missing; message names the field."""


class DimensionError(CamodiffError):
    """Array shapes or channel counts do not match an operation's contract."""


class ValidationError(CamodiffError):
    """Input data violates a documented precondition (non-binary mask, ...)."""


class NumericalDomainError(CamodiffError):
    """An operation was evaluated outside its numerically safe domain."""


class SamplerConfigError(CamodiffError):
    """Sampler settings produce an invalid reverse step."""


class InternalConsistencyError(CamodiffError):
    """An internal invariant broke (e.g. unexpected imaginary residue)."""


class EndpointError(CamodiffError):
    """Transport-level failure talking to a remote endpoint, post-retries."""

    def __init__(self, message: str, turn_index: int | None = None):
        super().__init__(message)
        self.turn_index = turn_index


class ProtocolError(CamodiffError):
    """The endpoint answered, but the reply violates the dialogue protocol."""


class LexiconViolationError(CamodiffError):
    """Prompt text contains banned vocabulary after the corrective re-ask."""

    def __init__(self, message: str, offending_words: list[str]):
        super().__init__(message)
        self.offending_words = offending_words


class IngestionError(CamodiffError):
    """A dataset folder could not be read into training samples."""


class CheckpointError(CamodiffError):
    """Checkpoint container is corrupt or from an unknown format version."""


class TrainingDivergedError(CamodiffError):
    """A non-finite loss was observed; carries step diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
