"""Exception types shared across the solver stack."""


class DomainGeometryError(ValueError):
    """A point or polygon violates a geometric precondition (outside, on boundary, degenerate)."""


class PointLocationError(LookupError):
    """A query point could not be located inside the mesh within tolerance."""


class SingularSystemError(RuntimeError):
    """A saddle-point factorization or solve failed (structurally or numerically singular).

    Carries ``rcond``, a reciprocal condition estimate of the offending matrix
    when one could be computed, as the discrete signal that the linearized
    operator is not invertible.
    """

    def __init__(self, message, rcond=None):
        super().__init__(message)
        self.rcond = rcond


class StateNotConvergedError(RuntimeError):
    """A nonlinear state solve did not reach tolerance where a converged state is required.

    The partially converged solution is attached as ``solution``.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution
