"""Exception types shared across the package."""


class PCBFError(Exception):
    pass


class ConfigError(PCBFError, ValueError):
    pass


class ShapeError(PCBFError, ValueError):
    pass


class DivergenceError(PCBFError, ArithmeticError):
    """Raised when an integrated state becomes non-finite or exceeds the norm guard."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class InfeasibleFilterError(PCBFError):
    """The CBF constraint cannot be met: L_g h = 0 while the drift term is negative."""


class SingularityError(PCBFError, ValueError):
    pass


class FormatError(PCBFError, ValueError):
    pass


class TrainingError(PCBFError, ArithmeticError):
    def __init__(self, epoch, batch, message=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message or f"non-finite loss at epoch {epoch}, batch {batch}")
