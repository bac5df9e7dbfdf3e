"""Exception hierarchy shared across the package."""


class NRSfMError(Exception):
    """Base class for all errors raised by deep_nrsfm."""


class ShapeError(NRSfMError, ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericalFailure(NRSfMError):
    """A numerical routine failed; ``payload`` carries the offending input."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class DegenerateCameraError(NumericalFailure):
    pass


class GradientInstabilityError(NumericalFailure):
    def __init__(self, message, frames=()):
        super().__init__(message)
        self.frames = tuple(frames)


class DivergenceError(NumericalFailure):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class IllPosedDictionaryError(NRSfMError, ValueError):
    pass


class PoisonedStepError(NRSfMError):
    pass


class TrainingCollapseError(NRSfMError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class EmptyHistoryError(NRSfMError, ValueError):
    pass


class InsufficientObservationsError(NRSfMError, ValueError):
    pass


class InsufficientDataError(NRSfMError, ValueError):
    pass


class DegenerateAlignmentError(NRSfMError, ValueError):
    pass


class TrackParseError(NRSfMError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(NRSfMError, ValueError):
    pass
