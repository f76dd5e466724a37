"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: configuration problems -> 2,
I/O and file-format problems -> 3, violated invariants/contracts -> 4.
"""


class EmcurateError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(EmcurateError):
    """Invalid or inconsistent configuration."""


class VolumeFormatError(EmcurateError):
    """Corrupt or unsupported binary volume file."""


class ShapeError(EmcurateError):
    """Array dims/spacing mismatch between operands."""


class CatalogError(EmcurateError):
    """Unknown structure label or malformed catalog."""


class UndefinedRateError(EmcurateError):
    """A classification rate was requested with a zero denominator."""

    def __init__(self, rate: str):
        self.rate = rate
        super().__init__(f"rate '{rate}' is undefined (zero denominator)")


class ModelError(EmcurateError):
    """Segmentation model misuse (e.g. predict before fit)."""


class ProtocolError(EmcurateError):
    """Malformed exchange with an external judge process."""
