"""Exception hierarchy shared by every tabwild module.

The CLI maps these onto stable exit codes: config problems exit 2, data and
protocol problems exit 3, numeric failures exit 4.
"""


class TabwildError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TabwildError):
    """Invalid run configuration: bad flags, unresolvable paths, unknown keys."""


class IngestionError(TabwildError):
    """A CSV or manifest could not be ingested (malformed, ragged, empty)."""


class ProtocolError(TabwildError):
    """An experiment-protocol precondition was violated."""


class EncodingError(TabwildError):
    """A row or datum cannot be encoded (too long for the configured capacity)."""


class MetricError(TabwildError):
    """A metric is undefined on the given input (e.g. single-class AUC)."""


class CheckpointError(TabwildError):
    """A checkpoint file is unreadable, corrupt, or of the wrong variant."""


class NumericError(TabwildError):
    """A numeric invariant broke: NaN values, empty softmax support, etc."""
