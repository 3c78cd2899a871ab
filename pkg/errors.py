"""Exceptions raised across dforce."""


class DForceError(Exception):
    """Base class; the CLI turns any of these into exit status 1."""


class DomainError(DForceError, ValueError):
    """An input is outside the domain an operation accepts."""


class ConfigError(DForceError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NonFiniteError(DForceError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class RolloutError(NonFiniteError):
    def __init__(self, iteration, diagnostics=None):
        self.iteration = iteration
        super().__init__(f"non-finite frames at rollout iteration {iteration}", diagnostics)
