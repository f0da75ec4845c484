"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
runtime failures (divergence, malformed inputs, desync) exit 3, and
privacy-infeasibility exits 4.
"""


class DprecError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(DprecError):
    """A configuration value or combination is not allowed."""


class ShapeMismatchError(DprecError):
    """Operands have incompatible shapes, partitions, or architectures."""


class TrainingDivergedError(DprecError):
    """Local training produced a non-finite loss or gradient."""


class BudgetExceededError(DprecError):
    """Candidate enumeration would exceed the configured compute budget."""


class MalformedMessageError(DprecError):
    """A compressed message failed validation.

    ``offset`` is the byte position at which wire-format parsing could
    not continue (None for structural errors on decoded messages).
    """

    def __init__(self, message: str, offset: int | None = None) -> None:
        super().__init__(message)
        self.offset = offset


class InvalidOrderError(DprecError):
    """A Renyi order outside the valid domain was requested."""


class OverheadExceedsDeltaError(DprecError):
    """The importance-sampling overhead term is at least delta.

    Raise the total communicated bits or reduce the number of steps.
    """


class VacuousBoundError(DprecError):
    """The requested bias target makes the bitrate bound vacuous."""


class InfeasibleError(DprecError):
    """No parameter value can meet the requested privacy target."""


class DesyncError(DprecError):
    """A client's update history cannot reproduce the server model."""
