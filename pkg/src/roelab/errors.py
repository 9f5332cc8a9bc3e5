"""Exception types shared across roelab.

The CLI maps ``ValidationError`` to exit code 2 and ``InvariantViolation``
to exit code 3.
"""

from __future__ import annotations


class RoelabError(Exception):
    pass


class ValidationError(RoelabError, ValueError):
    """Bad user input: configuration, moduli, measures, preconditions."""


class NotGeneratedError(ValidationError):
    pass


class NotNestedError(ValidationError):
    pass


class CoverTooShallowError(ValidationError):
    pass


class SizeBudgetError(RoelabError):
    pass


class InvariantViolation(RoelabError):
    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        self.detail = detail
        msg = f"invariant violated: {invariant}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NotEquivariantError(ValidationError):
    def __init__(self, deck_element: int, x: int, y: int):
        self.witness = (deck_element, x, y)
        super().__init__(
            f"operator is not deck-equivariant: deck element {deck_element} "
            f"moves entry ({x}, {y})"
        )
