"""Exception types shared across the pipeline."""


class MedforgeError(Exception):
    """Base class for all pipeline-specific failures."""


class ManifestError(MedforgeError):
    """A manifest file or record does not conform to the expected schema."""


class IntegrityError(MedforgeError):
    """A persisted artifact disagrees with its own header, counts, or checksum."""


class SchemaError(MedforgeError):
    """A source table does not match its declared schema mapping."""


class CaptionGenerationError(MedforgeError):
    """Caption generation failed for a triplet after exhausting retries."""


class TrainingError(MedforgeError):
    """Training cannot start or continue (bad config, empty data, NaN loss)."""


class ConfigError(MedforgeError):
    """A run configuration file or override is invalid."""
