class FormatError(ValueError):
    """Malformed or truncated artifact file."""


class EmptyResultError(RuntimeError):
    """An operation produced nothing usable (no sensors, empty split)."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; carries the last good state."""

    def __init__(self, message, params=None, log=None):
        super().__init__(message)
        self.params = params
        self.log = log
