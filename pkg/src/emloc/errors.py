class EmlocError(Exception):
    """Base class for all package errors."""


class ConfigError(EmlocError):
    pass


class DataError(EmlocError):
    """Malformed or inconsistent input data (trace, graph, report)."""


class SchemaVersionError(DataError):
    pass


class DisconnectedNodesError(EmlocError):
    pass


class BinEdgeMismatchError(ValueError, EmlocError):
    pass


class DimensionMismatchError(ValueError, EmlocError):
    pass


class EmptySequenceError(ValueError, EmlocError):
    pass


class DegenerateConfigurationError(EmlocError):
    pass


class InsufficientDescriptorsError(ValueError, EmlocError):
    pass


class TrajectoryError(EmlocError):
    """Trajectory leaves free space."""


class UnknownScenarioError(KeyError, EmlocError):
    pass


class UntrainedModelError(EmlocError):
    pass
