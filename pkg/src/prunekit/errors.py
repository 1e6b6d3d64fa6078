"""Exception types shared across the toolkit."""


class PrunekitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(PrunekitError):
    """Malformed input: bad shapes, schemas, checksums, or arguments."""


class InfeasibleAllocationError(PrunekitError):
    """Raised when the per-layer floors cannot fit inside the remaining budget."""

    def __init__(self, floor_total: float, budget: float):
        self.floor_total = floor_total
        self.budget = budget
        super().__init__(
            "allocation infeasible: sum of layer floors Σξ = "
            f"{floor_total:g} exceeds the remaining-parameter budget "
            f"(1-s)N = {budget:g}"
        )


class NumericalError(PrunekitError):
    """Numerical failure: training divergence or degenerate calibration data."""
