"""Exception hierarchy.

Every error carries a short ``category`` string so the command line can report
failures in a machine-parsable way.
"""


class SianmsError(Exception):
    category = "error"


class ValidationError(SianmsError, ValueError):
    """An invariant of a domain object or config was violated."""

    category = "validation"


class ConfigError(ValidationError):
    category = "config"


class SceneFormatError(ValidationError):
    """A scene/detections/report file could not be parsed."""

    category = "format"


class BehindCameraError(SianmsError, ValueError):
    category = "behind-camera"


class OverlapError(SianmsError):
    """Two frustums do not overlap; a match built on them must be dismissed."""

    category = "no-overlap"


class DegenerateAxisError(SianmsError, ValueError):
    category = "degenerate-axis"


class DegenerateFitError(SianmsError, ValueError):
    category = "degenerate-fit"


class EmptyFitError(SianmsError):
    """Not enough points to fit a box."""

    category = "empty-fit"


class NotAdjacentError(SianmsError, ValueError):
    category = "not-adjacent"


class DivergenceError(SianmsError, RuntimeError):
    category = "divergence"
