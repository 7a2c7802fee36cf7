"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration document or parameter value is invalid."""


class BlowupError(RuntimeError):
    """The particle state became non-finite during time stepping.

    Unbounded growth of a finite state is legitimate (it happens in the
    non-flocking regime); this error fires only on inf/nan entries.
    """

    def __init__(self, time: float, step: int | None = None):
        self.time = time
        self.step = step
        where = f"step {step}" if step is not None else "a step"
        super().__init__(f"non-finite state after {where} (t = {time:.6g})")
