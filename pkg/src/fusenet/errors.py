"""Exception hierarchy shared by every fusenet module.

The CLI maps these onto stable exit codes via ``exit_code``.
"""


class FusenetError(Exception):
    exit_code = 1


class UsageError(FusenetError):
    exit_code = 1


class ConfigurationError(FusenetError):
    exit_code = 1


class ShapeError(FusenetError):
    exit_code = 1


class PrecisionError(FusenetError):
    exit_code = 1


class DataError(FusenetError):
    exit_code = 2


class FormatError(DataError):
    """Malformed image payload (PGM)."""


class CheckpointError(DataError):
    pass


class EvaluationError(DataError):
    """A metric is undefined for the given labels (e.g. a single-class set)."""


class TrainingError(FusenetError):
    exit_code = 3
