"""Exception hierarchy used across the package."""


class ImlsError(Exception):
    """Base class for every error raised by imlspike."""


class DimensionError(ImlsError, ValueError):
    pass


class PreconditionError(ImlsError, ValueError):
    pass


class StateError(ImlsError, RuntimeError):
    """Operation not allowed in the object's current state (frozen, fused, ...)."""


class MaskingError(ImlsError, ValueError):
    pass


class CorruptionError(ImlsError, ValueError):
    """Spike data violates its level bound."""


class CheckpointFormatError(ImlsError, ValueError):
    pass


class ProfileError(ImlsError, ValueError):
    pass


class TrainingDivergedError(ImlsError, RuntimeError):
    pass


class ManifestError(ImlsError, ValueError):
    """Base for manifest/feature parse errors. Carries the offending line."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class MissingFileError(ManifestError):
    pass


class RaggedRowError(ManifestError):
    pass


class NonNumericError(ManifestError):
    pass


class LabelRangeError(ManifestError):
    pass


class ConfigError(ImlsError, ValueError):
    pass
