"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a model function."""


class RoadParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RoadValidationError(ValueError):
    pass


class InfeasibleProfileError(RuntimeError):
    """No speed profile satisfies the coordinator constraints.

    ``cell`` is the index of the first grid cell that cannot be reached.
    """

    def __init__(self, cell: int, position: float, message: str = ""):
        msg = f"no feasible speed profile: blocked at cell {cell} (z = {position:.1f} m)"
        if message:
            msg += f"; {message}"
        super().__init__(msg)
        self.cell = cell
        self.position = position


class TuningError(RuntimeError):
    pass


class MpcInfeasibleError(RuntimeError):
    def __init__(self, message: str, constraints=(), dump=None):
        super().__init__(message)
        self.constraints = tuple(constraints)
        self.dump = dump


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ComparisonError(RuntimeError):
    """Cells of a comparison do not share the same average speed."""
