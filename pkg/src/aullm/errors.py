class AullmError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(AullmError, ValueError):
    pass


class InputError(AullmError, ValueError):
    """Non-finite or out-of-range tensor input."""


class ShapeError(AullmError, ValueError):
    pass


class ManifestVersionError(AullmError):
    pass


class CorruptionError(AullmError):
    """Stored clip bytes disagree with the manifest's declared shape."""


class ClipNotFoundError(AullmError, KeyError):
    pass


class ModeError(AullmError, RuntimeError):
    """Operation called in the wrong train/eval mode."""


class NonFiniteLossError(AullmError, FloatingPointError):
    def __init__(self, terms):
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss encountered ({detail})")


class StageError(AullmError):
    """Wraps an error raised inside one stage of the forward pipeline."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
