"""Exception hierarchy shared by every module."""


class AdvkitError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit status."""


class InvalidShapeError(AdvkitError, ValueError):
    pass


class InvalidArgumentError(AdvkitError, ValueError):
    pass


class StateError(AdvkitError, RuntimeError):
    pass


class NumericError(AdvkitError, ArithmeticError):
    pass


class ZeroGradientError(NumericError):
    """Raised when a gradient with zero L1 norm would have to be normalized."""


class CorruptFileError(AdvkitError, OSError):
    pass


class TrainingFailureError(AdvkitError, RuntimeError):
    def __init__(self, epoch, message="loss diverged"):
        super().__init__(f"training failed at epoch {epoch}: {message}")
        self.epoch = epoch
