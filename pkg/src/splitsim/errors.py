"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid configuration value. ``field`` is the dotted path of the offender."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceError(ValueError):
    """Malformed or inconsistent request trace."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractViolation(RuntimeError):
    """A caller broke an operation's precondition (scheduler/engine bug)."""


class AdmissionDenied(Exception):
    """KV block allocation would exceed pool capacity; the request must wait."""


class SimulationError(RuntimeError):
    """The engine cannot make progress (livelock or deadlock)."""
