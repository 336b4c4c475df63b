"""Exception hierarchy shared by every stage of the pipeline."""


class PSkillError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PSkillError, ValueError):
    pass


class ShapeError(PSkillError, ValueError):
    pass


class UnsupportedEncodingError(ConfigurationError):
    """Raised when a goal encoding is undefined for a layout (e.g. row/col off-grid)."""


class GenerationError(PSkillError, RuntimeError):
    pass


class TrainingError(PSkillError, RuntimeError):
    pass


class FormatError(PSkillError, ValueError):
    """Bad magic, unknown version, or unparseable header in a persisted artifact."""


class IntegrityError(PSkillError, ValueError):
    """Persisted artifact is truncated or fails its checksum."""
