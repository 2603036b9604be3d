"""Exception types shared across the package."""


class AkhbarError(Exception):
    """Base class for all errors raised by this package."""


class ManifestError(AkhbarError):
    """Malformed manifest file or manifest invariant violation."""


class LabelError(AkhbarError):
    """Malformed detection label file."""


class ImageError(AkhbarError):
    """Invalid image payload or incompatible image shapes."""


class FixtureMissError(AkhbarError):
    """A replay backend has no recorded entry for the requested digest."""


class BackendError(AkhbarError):
    """Model load failure or a model/config shape mismatch."""


class ConfigError(AkhbarError):
    """Invalid or incomplete run configuration (bad values, missing API key)."""


class EvalError(AkhbarError):
    """Evaluation cannot proceed (id mismatches, empty reference, no ground truth)."""
