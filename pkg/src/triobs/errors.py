"""Exception types shared across modules."""


class SynthesisError(RuntimeError):
    """A construction step could not certify its inequality; `stage` names the step."""

    def __init__(self, stage: str, message: str, detail: dict | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.detail = detail or {}


class EnvelopeError(SynthesisError):
    """Envelope estimation failed (non-finite values or lost positivity)."""


class DivergenceError(ArithmeticError):
    """Integration produced a non-finite state."""

    def __init__(self, message: str, last_t: float):
        super().__init__(f"{message} (last finite state at t={last_t!r})")
        self.last_t = last_t


class PlanError(RuntimeError):
    """A switching window could not be synthesized."""

    def __init__(self, window: int, cause: Exception):
        super().__init__(f"window {window}: {cause}")
        self.window = window
        self.cause = cause
