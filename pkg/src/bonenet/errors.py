"""Exception types shared across the library."""


class BonenetError(Exception):
    """Base class for all library errors."""


class InvalidShape(BonenetError):
    pass


class ShapeMismatch(BonenetError):
    pass


class NotScalar(BonenetError):
    pass


class DegenerateBatch(BonenetError):
    pass


class InvalidRate(BonenetError):
    pass


class InvalidConfig(BonenetError):
    pass


class InvalidMetric(BonenetError):
    pass


class EmptyDataset(BonenetError):
    pass


class TooFewSamples(BonenetError):
    pass


class DivergedTraining(BonenetError):
    pass


class FormatError(BonenetError):
    pass


class ConfigError(BonenetError):
    pass


class UnknownLayer(BonenetError):
    pass


class DegenerateHeatmap(BonenetError):
    """Raised when a region-mass fraction is undefined (all-zero heatmap)."""
