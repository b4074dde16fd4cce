"""Exception hierarchy.

Each error carries a ``stage`` tag so the CLI can report where a pipeline
failed and map the failure to an exit code.
"""


class UnivodeError(Exception):
    stage = "core"
    exit_code = 3


class UnsupportedOrderError(UnivodeError, ValueError):
    pass


class ResolutionError(UnivodeError, ValueError):
    pass


class InvalidCombinationError(UnivodeError, ValueError):
    pass


class ApproximationError(UnivodeError):
    stage = "fit"

    def __init__(self, message, achieved_error=None):
        super().__init__(message)
        self.achieved_error = achieved_error


class ChainDepthError(UnivodeError):
    stage = "chain"

    def __init__(self, message, max_feasible=0):
        super().__init__(message)
        self.max_feasible = max_feasible


class DegenerateGeometryError(UnivodeError):
    stage = "embedding"


class SingularMatrixError(UnivodeError, ValueError):
    stage = "embedding"


class DisentangleError(UnivodeError):
    stage = "embedding"

    def __init__(self, message, residual=()):
        super().__init__(message)
        self.residual = list(residual)


class GeometryError(UnivodeError):
    stage = "tube"


class DisjointnessError(UnivodeError):
    stage = "field"


class StiffnessError(UnivodeError):
    stage = "integrate"

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class EscapeError(UnivodeError):
    stage = "integrate"

    def __init__(self, message, exit_time=None, trajectory=None):
        super().__init__(message)
        self.exit_time = exit_time
        self.trajectory = trajectory


class SingularDenominatorError(UnivodeError, ValueError):
    stage = "integrate"
