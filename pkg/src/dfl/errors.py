"""Exception types shared across the toolkit."""


class DflError(Exception):
    """Base class for every toolkit error."""


class ManifestError(DflError):
    """Malformed or internally inconsistent dataset manifest."""


class ImageError(DflError):
    """Image decode or preprocessing failure."""


class StoreError(DflError):
    """Embedding-store format violation or I/O failure."""


class BackboneError(DflError):
    """Backbone sidecar/model loading or probe-validation failure."""


class ExtractionError(DflError):
    """Failure while extracting embeddings for a dataset."""


class ConfigError(DflError):
    """Invalid head, benchmark, or ablation configuration."""


class CheckpointError(DflError):
    """Head checkpoint format violation."""


class MetricError(DflError):
    """Metric undefined for the given inputs."""
