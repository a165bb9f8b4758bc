"""Exception hierarchy shared by all modules."""


class PlatoonError(Exception):
    """Base class for every error raised by this package."""

    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class InvalidConfigError(PlatoonError, ValueError):
    code = "invalid-config"


class DegenerateGeometryError(PlatoonError, ValueError):
    code = "degenerate-geometry"


class InvalidCoefficientError(PlatoonError, ValueError):
    code = "invalid-coefficient"


class SingularSteeringError(PlatoonError, ValueError):
    code = "singular-steering"


class InvalidLinearizationError(PlatoonError, ValueError):
    code = "invalid-linearization"


class QosInfeasibleError(PlatoonError):
    code = "qos-infeasible"

    def __init__(self, slot: int, message: str = ""):
        self.slot = slot
        super().__init__(message or f"QoS rate threshold cannot be met in slot {slot}")

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["slot"] = self.slot
        return d


class PayloadInfeasibleError(PlatoonError):
    code = "payload-infeasible"


class ConsistencyError(PlatoonError):
    code = "consistency"

    def __init__(self, message: str, slot: int | None = None):
        self.slot = slot
        super().__init__(message if slot is None else f"{message} (slot {slot})")


class CollisionError(PlatoonError):
    code = "collision"


class StepSizeError(PlatoonError):
    code = "step-size"


class InvalidWeatherError(PlatoonError, ValueError):
    code = "invalid-weather"


class UndefinedBaselineError(PlatoonError, ValueError):
    code = "undefined-baseline"


class ComparisonError(PlatoonError):
    code = "comparison"


class BlockSolverError(PlatoonError):
    """A BCD block failed; carries the outer iteration index."""

    code = "block-solver"

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"outer iteration {iteration}: {cause}")
