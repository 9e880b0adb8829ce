"""Exception types shared across the toolkit."""


class TransactError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TransactError):
    """A config value violates an architectural invariant; message names the field."""


class ContainerError(TransactError):
    """Tensor container file is malformed, truncated, or incomplete."""


class ForwardError(TransactError):
    """Forward pass rejected its input or hit non-finite values."""


class PruneError(TransactError):
    """Invalid salience input, keep-set, or prune target."""


class ScheduleError(TransactError):
    """Infeasible or inconsistent multi-shot schedule."""


class RecoveryError(TransactError):
    """Least-squares recovery could not be solved."""


class EvalError(TransactError):
    """Evaluation input is empty or produced non-finite values."""
