class NumericError(ArithmeticError):
    """Non-finite values, solver blow-up, or a failed inner root solve."""


class ValidationError(ValueError):
    """Model or configuration rejected before any computation."""

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = list(keys or [])
