"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but carries nothing to compute on (empty, all-masked, ...)."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class UnknownWordError(KeyError):
    """Word outside the closed vocabulary."""

    def __str__(self):
        return f"unknown word {self.args[0]!r} (closed vocabulary, no UNK token)"


class IntegrityError(RuntimeError):
    """A checkpoint or dataset file failed its integrity check."""


class FrozenParameterDrift(RuntimeError):
    """A parameter that must stay frozen changed during training."""

    def __init__(self, name: str):
        super().__init__(f"frozen parameter {name!r} changed during training")
        self.name = name
