from .const import EXIT_NUMERICAL, EXIT_RUNTIME, EXIT_VALIDATION


class RigSplatError(Exception):
    """Base exception for all rig-splat errors."""

    exit_code = EXIT_RUNTIME

    def __init__(self, message="rig-splat failed."):
        self.message = message
        super().__init__(self.message)


class InvalidInputError(RigSplatError):
    """Raised when an input has the wrong shape, count or value range."""

    exit_code = EXIT_VALIDATION

    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


class ConfigError(RigSplatError):
    """Raised when a configuration field is unknown or invalid."""

    exit_code = EXIT_VALIDATION

    def __init__(self, field, reason):
        self.field = field
        self.message = f"Invalid config field '{field}': {reason}"
        super().__init__(self.message)


class MissingInputError(RigSplatError):
    """Raised when a required input file or directory does not exist."""

    exit_code = EXIT_VALIDATION

    def __init__(self, path, what="Input"):
        self.path = path
        self.message = f"{what.capitalize()} '{path}' not found."
        super().__init__(self.message)


class DegenerateAlignmentError(RigSplatError):
    """Raised when a correspondence set cannot determine an alignment."""

    def __init__(self, message="Correspondences are collinear or degenerate."):
        self.message = message
        super().__init__(self.message)


class CheckpointError(RigSplatError):
    """Raised when a checkpoint or prototype blob cannot be read."""

    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


class NumericalAbortError(RigSplatError):
    """Raised when the fitting loop produces a non-finite loss or gradient."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, term, iteration):
        self.term = term
        self.iteration = iteration
        self.message = f"Non-finite value in '{term}' at iteration {iteration}."
        super().__init__(self.message)
