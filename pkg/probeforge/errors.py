"""Exception hierarchy for probeforge.

Library code raises these; only the CLI turns them into exit codes.
"""


class ProbeForgeError(Exception):
    """Base class for every error raised by probeforge."""


class ShapeError(ProbeForgeError, ValueError):
    """Tensor shapes do not fit the operation."""


class ConfigError(ProbeForgeError, ValueError):
    """Invalid configuration value or model/probe configuration."""


class InputError(ProbeForgeError, ValueError):
    """Invalid user-supplied data (tokens, prompts, records)."""


class CapacityError(ProbeForgeError, ValueError):
    """A sequence does not fit the model's context window."""


class NumericError(ProbeForgeError, ArithmeticError):
    """A kernel produced NaN or Inf."""


class CompatibilityError(ProbeForgeError, ValueError):
    """Two artifacts that must agree (configs, maps, profiles) do not."""

    def __init__(self, message: str, fields=None):
        self.fields = list(fields or [])
        if self.fields:
            message = f"{message}: differing fields {', '.join(self.fields)}"
        super().__init__(message)


class TemplateError(ProbeForgeError, ValueError):
    """A prompt template is missing a placeholder or references an unknown one."""


class UndefinedBaselineError(ProbeForgeError, ZeroDivisionError):
    """Relative difference against a zero baseline."""


class InsufficientDataError(ProbeForgeError, ValueError):
    """Not enough samples for the requested statistic."""


class UsageError(ProbeForgeError):
    """Command-line misuse."""


class CheckpointFormatError(ProbeForgeError, ValueError):
    """Base class for checkpoint file format violations."""


class CheckpointNotFoundError(CheckpointFormatError):
    """The checkpoint path cannot be opened."""


class BadMagicError(CheckpointFormatError):
    """The file does not start with the checkpoint magic."""


class ManifestError(CheckpointFormatError):
    """The manifest length or manifest JSON is invalid."""


class TensorShapeError(CheckpointFormatError):
    """A tensor's declared shape disagrees with its payload or the config."""

    def __init__(self, message: str, tensor: str = ""):
        self.tensor = tensor
        super().__init__(message)


class OffsetError(CheckpointFormatError):
    """A tensor's payload offset is not where the format requires it."""


class TruncatedPayloadError(CheckpointFormatError):
    """The payload is shorter (or longer) than the manifest declares."""
