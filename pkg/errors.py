"""Exception hierarchy. Classes that reach the CLI carry their exit status."""

from typing import Optional


class CaptoolError(Exception):
    exit_code: int = 1


class ConfigError(CaptoolError):
    """Malformed or invalid experiment configuration."""

    exit_code = 2

    def __init__(self, problems: list[str] | str):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


class SolverConvergenceError(CaptoolError):
    """A primal-dual solve stopped before the duality gap reached tolerance."""

    exit_code = 3

    def __init__(self, last_gap: float, iterations: int, context: Optional[str] = None):
        self.last_gap = last_gap
        self.iterations = iterations
        self.context = context
        where = f" ({context})" if context else ""
        super().__init__(
            f"solver did not converge{where}: gap {last_gap:.3e} after {iterations} iterations"
        )

    def with_context(self, context: str) -> "SolverConvergenceError":
        merged = f"{context}, {self.context}" if self.context else context
        return SolverConvergenceError(self.last_gap, self.iterations, merged)


class WitnessQualityError(CaptoolError):
    exit_code = 4

    def __init__(self, rescale: float, limit: float = 100.0):
        self.rescale = rescale
        super().__init__(f"witness rescale constant {rescale:.3g} exceeds {limit:g}")


class SkipBudgetError(CaptoolError):
    exit_code = 5

    def __init__(self, skipped: int, total: int):
        self.skipped = skipped
        self.total = total
        super().__init__(f"{skipped} of {total} samples skipped (budget is 10%)")


class GridMismatchError(CaptoolError):
    pass


class GridResolutionError(CaptoolError):
    pass


class SingularityError(CaptoolError):
    pass


class DomainError(CaptoolError):
    pass


class FeasibilityError(CaptoolError):
    """Candidate density does not dominate the target; carries the worst violation."""

    def __init__(self, worst_violation: float, at_index: tuple[int, ...]):
        self.worst_violation = worst_violation
        self.at_index = at_index
        super().__init__(f"G*f falls short of |u| by {worst_violation:.3e} at {at_index}")
