"""Exception hierarchy shared by every vhskit module."""


class VhskitError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(VhskitError):
    """Invalid keypoint geometry (non-finite coordinates, bad shapes)."""


class DegenerateVertebraError(GeometryError):
    """Vertebral segment EF too short to normalize a heart score."""


class InvalidScoreError(GeometryError):
    """A heart score that is not a finite real number."""


class ShapeError(VhskitError):
    """Array dimensions do not match the model configuration."""


class StateError(VhskitError):
    """An operation was called out of order (e.g. backward before forward)."""


class NumericError(VhskitError):
    """A non-finite value reached a numeric routine that requires finiteness."""


class ScheduleError(VhskitError):
    """Learning-rate schedule queried outside its epoch range."""


class ConfigError(VhskitError):
    """Invalid or inconsistent configuration."""


class DataError(VhskitError):
    """Dataset-level problem: missing files, unlabeled samples, bad splits."""


class ParseError(DataError):
    """A record that could not be parsed; message carries line/sample context."""


class ValidationError(DataError):
    """A parsed record that violates a dataset invariant."""


class SnapshotError(VhskitError):
    """A model snapshot file that is missing, corrupt, or incompatible."""
