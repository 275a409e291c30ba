"""Exception types shared across the engine."""


class StarprojError(Exception):
    pass


class UnboundAtom(StarprojError):
    """A formal atom has no binding in a substitution."""


class DivisionByZeroSymbol(StarprojError):
    """A bound surface gradient-square is identically zero."""


class DivisionByZero(StarprojError):
    """Numeric evaluation hit a zero denominator at the given point."""


class UnknownGenerator(StarprojError):
    """A generator is not registered in the algebra at hand."""


class NonPolynomialInACCS(StarprojError):
    """An operand's conjugate-pair degree cannot be bounded."""


class ProjectionResidual(StarprojError):
    """A constraint failed to vanish after projection."""


class InvalidSpec(StarprojError):
    """A model specification violates its invariants."""


class SingularM(StarprojError):
    """The deformation matrix I + G/4 is not invertible."""


class SingularConstraintMatrix(StarprojError):
    """The classical constraint-bracket matrix is singular."""


class DegreeTooHigh(StarprojError):
    """Brute-force oracle refused an operand above its degree cap."""


class ParseError(StarprojError):
    def __init__(self, message, line=1, column=1):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ValidationError(StarprojError):
    """A parsed model file fails semantic validation."""


class UnknownSuite(StarprojError):
    """run_checks was given a suite name it does not know."""
