class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or infinity."""


class DegenerateError(ValueError):
    """Input has no well-defined answer (e.g. a zero mean direction)."""


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, term):
        super().__init__(f"non-finite {term} loss at epoch {epoch}")
        self.epoch = epoch
        self.term = term
