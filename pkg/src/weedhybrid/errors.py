"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """An operation produced NaN or infinity from finite inputs."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending component."""

    def __init__(self, component: str, detail: str = ""):
        self.component = component
        msg = f"training diverged: non-finite {component} loss"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class FormatError(ValueError):
    """A serialized artifact (checkpoint, image file) is malformed."""


class DataError(ValueError):
    """A dataset input (manifest, config) failed validation; message carries line numbers."""
