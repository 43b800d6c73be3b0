"""Exception hierarchy for the lab-twin engine.

Every error raised by the package derives from :class:`LabTwinError`, so
callers (and the CLI) can distinguish simulation errors from programming
errors with a single except clause.
"""


class LabTwinError(Exception):
    """Base class for all engine errors."""


# -- registration / lookup ---------------------------------------------------

class DuplicateId(LabTwinError):
    """An entity, slot, process or event id is already registered."""


class RegistrationAfterStart(LabTwinError):
    """Registration attempted after the simulation started (time > 0)."""


class UnknownEntity(LabTwinError):
    """Referenced entity id is not registered."""


class UnknownSlot(LabTwinError):
    """Referenced state slot does not exist."""


class UnknownNode(LabTwinError):
    """Thermal link endpoint is not a registered thermal node."""


class UnknownChannel(LabTwinError):
    """Action addresses a channel/command the entity's kind does not declare."""


class UnitError(LabTwinError):
    """Unit metadata is unknown or inconsistent."""


# -- numeric / physical preconditions ----------------------------------------

class NonPositiveParameter(LabTwinError):
    """A parameter that must be strictly positive is zero or negative."""


class NonPositiveSolvent(LabTwinError):
    """Mixture created with solvent mass <= 0."""


class NegativeMoles(LabTwinError):
    """Mixture created with a negative solute amount."""


class NegativeMass(LabTwinError):
    """Transfer requested with a negative mass."""


class Overdraw(LabTwinError):
    """Transfer exceeds the available amount in the source."""


class CapacityExceeded(LabTwinError):
    """Pipette tip contents would exceed its capacity."""


class NonPositiveA(LabTwinError):
    """Arrhenius pre-exponential factor must be strictly positive."""


class ZeroCount(LabTwinError):
    """A count argument (batch size, step count) must be >= 1."""


class LengthMismatch(LabTwinError):
    """Per-environment argument list does not match the batch size."""


class NonFiniteState(LabTwinError):
    """A state slot became NaN or infinite; the step was rolled back."""


class CommandPending(LabTwinError):
    """A device command is already queued for the next step."""


class PreconditionFailed(LabTwinError):
    """A named device/process precondition does not hold."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        super().__init__(f"precondition failed: {name}" + (f" ({detail})" if detail else ""))


# -- workflow ------------------------------------------------------------------

class CycleDetected(LabTwinError):
    """Workflow description is not a tree."""


class LeafWithChildren(LabTwinError):
    """A workflow node declares both an action and children."""


class ActionFailed(LabTwinError):
    """A primitive action failed; the workflow halts."""

    def __init__(self, leaf_id: str, cause):
        self.leaf_id = leaf_id
        self.cause = cause
        super().__init__(f"action failed at leaf {leaf_id!r}: {cause}")


class WorkflowStillRunning(LabTwinError):
    """verify() called before the workflow terminated."""


# -- scenario io ---------------------------------------------------------------

class ParseError(LabTwinError):
    """Scenario text is not well-formed."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(message + where)


class ValidationError(LabTwinError):
    """Scenario is well-formed but references or values are invalid."""
