"""Exception types shared across the package."""


class AdvFlowError(Exception):
    """Base class for all errors raised by advflow."""


class ConfigError(AdvFlowError, ValueError):
    """Invalid configuration, shapes or dimensions.

    ``field`` carries a dotted path to the offending config entry when known.
    """

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class NumericError(AdvFlowError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, step=None, sample=None):
        extra = []
        if step is not None:
            extra.append(f"step={step}")
        if sample is not None:
            extra.append(f"sample={sample}")
        if extra:
            message = f"{message} ({', '.join(extra)})"
        super().__init__(message)
        self.step = step
        self.sample = sample


class InputError(AdvFlowError, ValueError):
    """Bad user-supplied data (rewards, distributions, metrics files)."""


class TiltError(InputError):
    """The linear tilt ``(1 + eta * A) p`` would go negative somewhere."""

    def __init__(self, message, index, max_eta):
        super().__init__(message)
        self.index = index
        self.max_eta = max_eta


class CheckpointError(AdvFlowError):
    """Malformed checkpoint or architecture mismatch."""
