"""Exception hierarchy shared by every stage of the pipeline."""


class RFSplatError(Exception):
    """Base class; the CLI maps subclasses to exit categories."""

    category = "error"


class InvalidInputError(RFSplatError, ValueError):
    category = "invalid-input"


class PlacementInfeasibleError(RFSplatError):
    """Poisson-disk sampling could not place the requested number of spheres."""

    category = "placement-infeasible"


class IncompleteInputError(RFSplatError, ValueError):
    category = "incomplete-input"


class ConfigError(RFSplatError, ValueError):
    category = "config"


class TrainingDivergedError(RFSplatError, FloatingPointError):
    category = "diverged"


class FormatError(RFSplatError):
    category = "format"


class CorruptHeaderError(FormatError):
    category = "corrupt-header"


class TruncatedRecordError(FormatError):
    category = "truncated"

    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


class VersionMismatchError(FormatError):
    category = "version-mismatch"

