"""Exception hierarchy shared by every geodiverse module."""


class GeodiverseError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(GeodiverseError, ValueError):
    """A value violates a documented invariant."""


class ConfigurationError(GeodiverseError, ValueError):
    """Inputs are inconsistent with each other or with the configuration."""


class ParseError(GeodiverseError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PersistenceError(GeodiverseError, OSError):
    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class DegenerateInputError(GeodiverseError, ValueError):
    """Input is well-formed but too small or too uniform to compute on."""


class EmptyGroupError(DegenerateInputError):
    pass


class InsufficiencyError(DegenerateInputError):
    """A (group, class) cell holds fewer samples than its quota."""

    def __init__(self, message, cell=None):
        self.cell = cell
        super().__init__(message)


class SaturationError(GeodiverseError, RuntimeError):
    """Sampling gave up before reaching the requested count."""

    def __init__(self, message, achieved=0, requested=0):
        self.achieved = achieved
        self.requested = requested
        super().__init__(message)


class NoOverlapError(GeodiverseError, ValueError):
    """A location or footprint does not intersect any class of a region map."""


class SourceError(GeodiverseError, RuntimeError):
    """Tile source failed (network, decode, missing asset)."""


class TransientSourceError(SourceError):
    """Retryable source failure."""


class AvailabilityError(SourceError):
    """No scene exists for the request."""


class CloudFilterError(AvailabilityError):
    """Scenes exist but all exceed the cloud-cover bound."""


class AlignmentError(GeodiverseError, ValueError):
    def __init__(self, message, unmatched=()):
        self.unmatched = list(unmatched)
        super().__init__(message)


class UndefinedCorrelationError(DegenerateInputError):
    pass
