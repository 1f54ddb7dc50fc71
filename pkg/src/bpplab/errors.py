"""Exception hierarchy shared by all bpplab modules.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
data/format problems exit 3, numeric/training failures exit 4.
"""


class BppLabError(Exception):
    """Base class for all bpplab errors."""


class ConfigurationError(BppLabError):
    """Invalid configuration value or inconsistent config combination."""


class FormatError(BppLabError):
    """Malformed file: bad magic, bad version, truncation, bad header."""


class DatasetConsistencyError(BppLabError):
    """Image/label files disagree (counts, shapes)."""


class DimensionError(BppLabError):
    """Shape mismatch between arrays that must agree."""


class DomainError(BppLabError):
    """Value outside its documented domain (pixel range, label range, ...)."""


class StateError(BppLabError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NumericError(BppLabError):
    """Non-finite values or degenerate numerical situations."""


class DegenerateBatchError(NumericError):
    """Contrastive batch where no anchor has a positive pair."""


class DegenerateSpreadError(NumericError):
    """MAD of zero: anomaly indices are undefined."""


class TrainingError(BppLabError):
    """Training diverged (non-finite loss); carries epoch/batch context."""
