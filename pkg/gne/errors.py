"""
Exception hierarchy shared by the equilibrium engine and the CLI.
"""


class GneError(Exception):
    """Base class for every error raised by the suite."""


class ValidationError(GneError):
    """Input data has the wrong shape, sign or range."""


class ContractViolationError(ValidationError):
    """An operator received a vector of the wrong dimension."""

    def __init__(self, what, expected, got):
        super().__init__(f"{what}: expected dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class ConfigurationError(ValidationError):
    """A step size or solver option is unusable."""


class AssumptionViolationError(GneError):
    """A standing assumption of the game or the graph does not hold."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components or []


class StepSizeRejectedError(GneError):
    """The preconditioning matrix built from the steps is not positive definite."""

    def __init__(self, min_eigenvalue):
        super().__init__(
            f"Preconditioner is not positive definite (smallest eigenvalue {min_eigenvalue:.6g})"
        )
        self.min_eigenvalue = min_eigenvalue


class SolverPrerequisiteError(GneError):
    """The requested solver needs a hypothesis the instance does not satisfy."""


class DivergenceError(GneError):
    """An iterate became non-finite."""

    def __init__(self, iteration, last_finite):
        super().__init__(f"Non-finite iterate at iteration {iteration}")
        self.iteration = iteration
        self.last_finite = last_finite


class SpectralConvergenceError(GneError):
    """Power iteration hit its cap before reaching the requested accuracy."""

    def __init__(self, estimate, iterations):
        super().__init__(
            f"Power iteration did not converge after {iterations} iterations "
            f"(last estimate {estimate:.12g})"
        )
        self.estimate = estimate
        self.iterations = iterations


class AuditFailure(GneError):
    """An agent update touched data it does not own and did not receive."""

    def __init__(self, agent, field):
        super().__init__(f"Agent {agent} accessed non-local field '{field}'")
        self.agent = agent
        self.field = field
