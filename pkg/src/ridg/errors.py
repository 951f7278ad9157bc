"""Exception types shared across the solver."""

from __future__ import annotations


class RidgError(Exception):
    """Base class for solver failures."""


class ConfigError(RidgError, ValueError):
    """Invalid configuration; ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonConvergence(RidgError):
    """A regional Newton solve failed to reach its tolerance."""

    def __init__(self, residual_norm: float, iterate=None, iterations: int = 0,
                 element: int | None = None, task: int | None = None):
        self.residual_norm = float(residual_norm)
        self.iterate = iterate
        self.iterations = iterations
        self.element = element
        self.task = task
        super().__init__(self._message())

    def _message(self) -> str:
        where = []
        if self.element is not None:
            where.append(f"element {self.element}")
        if self.task is not None:
            where.append(f"task {self.task}")
        loc = f" ({', '.join(where)})" if where else ""
        return (f"Newton did not converge after {self.iterations} iterations{loc}; "
                f"last residual norm {self.residual_norm:.3e}")

    def located(self, element: int | None = None, task: int | None = None) -> "NonConvergence":
        return NonConvergence(self.residual_norm, self.iterate, self.iterations,
                              element if element is not None else self.element,
                              task if task is not None else self.task)


class Instability(RidgError):
    """The solution blew up (non-finite values or L2 growth past the threshold)."""

    def __init__(self, step: int, time: float, norm: float, initial_norm: float,
                 task: int | None = None):
        self.step = step
        self.time = time
        self.norm = norm
        self.initial_norm = initial_norm
        self.task = task
        loc = f" on task {task}" if task is not None else ""
        super().__init__(f"instability at step {step} (t={time:.6g}){loc}: "
                         f"L2 norm {norm:.3e} vs initial {initial_norm:.3e}")

    def located(self, task: int) -> "Instability":
        return Instability(self.step, self.time, self.norm, self.initial_norm, task)
