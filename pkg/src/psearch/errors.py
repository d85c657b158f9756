class PersonSearchError(Exception):
    """Base class for errors raised by this package."""


class CatalogError(PersonSearchError, KeyError):
    """A layer id is not present in the backbone catalog."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ContractError(PersonSearchError, ValueError):
    """Shapes, resolutions or channel counts violate an operation's contract."""


class ConfigError(PersonSearchError, ValueError):
    """Invalid or inconsistent configuration."""


class LabelError(PersonSearchError, IndexError):
    """Identity label outside the lookup table."""


class ProtocolError(PersonSearchError, ValueError):
    """Evaluation protocol cannot be applied to the given data."""


class GenerationError(PersonSearchError, RuntimeError):
    """Synthetic data or signature generation failed."""


class BackboneUnavailableError(PersonSearchError, NotImplementedError):
    """The requested backbone cannot run in this environment."""


class TrainingError(PersonSearchError, RuntimeError):
    """Training diverged (non-finite loss)."""


class ArgumentError(PersonSearchError, ValueError):
    """Bad argument to a user-facing operation."""
