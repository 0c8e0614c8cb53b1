"""Exception types raised across the package."""


class BitleakError(Exception):
    pass


class ShapeError(BitleakError, ValueError):
    """Input dimensions do not chain through the network."""


class StateError(BitleakError, RuntimeError):
    pass


class TrainingError(BitleakError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigurationError(BitleakError, ValueError):
    pass


class OptimizationError(BitleakError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NumericalError(BitleakError, ArithmeticError):
    pass


class IntegrityError(BitleakError, ValueError):
    pass


class CoverageError(BitleakError, ValueError):
    """An example lacks the in/out shadow models the attack mode needs."""


class FormatError(BitleakError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompleteRunError(StateError):
    """A run manifest is missing cells that a report needs."""

    def __init__(self, missing):
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        super().__init__(f"{len(missing)} cell(s) incomplete: {shown}")
        self.missing = list(missing)
