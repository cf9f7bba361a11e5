"""Exception hierarchy shared by all relyam modules."""


class RelyamError(Exception):
    """Base class for every error raised by relyam."""


class MeshError(RelyamError):
    """A mesh or background file violates a structural invariant.

    ``entity`` names the kind of object (``"tet"``, ``"boundary_face"``, ...)
    and ``index`` the first offending one, when there is one.
    """

    def __init__(self, message, entity=None, index=None):
        if entity is not None and index is not None:
            message = f"{message} ({entity} {index})"
        super().__init__(message)
        self.entity = entity
        self.index = index


class MeshParseError(MeshError):
    """The mesh file is not valid JSON or misses required keys."""


class NoPositiveRootError(RelyamError):
    """``a x^q + b x^r = 1`` has no positive solution."""


class InvalidExponentsError(RelyamError, ValueError):
    """Exponents outside the admissible range."""


class EmptyConstraintSetError(RelyamError):
    """The region admits no nonzero field, so the constraint set is empty."""


class PreconditionError(RelyamError, ValueError):
    """Input data violates a documented precondition (signs, positivity)."""


class NotYamabeNegativeError(PreconditionError):
    """The background is not Yamabe negative."""


class NormalizationError(RelyamError):
    """Curvature normalization produced curvatures of the wrong sign."""


class ConvergenceError(RelyamError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class PositivityError(ConvergenceError):
    """A solver could not keep the iterate strictly positive."""
