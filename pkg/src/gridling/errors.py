"""Exception hierarchy shared by all gridling modules.

Every error carries a short ``code`` (the violation name surfaced by the CLI
and the wire protocol) in addition to a human readable message.
"""


class GridlingError(Exception):
    code = "Error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def __str__(self):
        msg = super().__str__()
        return msg if msg.startswith(self.code) else f"{self.code}: {msg}"


# job files
class JobFileError(GridlingError):
    code = "JobFileError"


class MissingCommand(JobFileError):
    code = "MissingCommand"


class DuplicateDirective(JobFileError):
    code = "DuplicateDirective"


class BadValue(JobFileError):
    code = "BadValue"


class UnknownDirective(JobFileError):
    code = "UnknownDirective"


# cluster
class UnknownAllocation(GridlingError):
    code = "UnknownAllocation"


class UnknownNode(GridlingError):
    code = "UnknownNode"


# accounts / scheduling
class InactiveUser(GridlingError):
    code = "InactiveUser"


class DuplicateUsername(GridlingError):
    code = "DuplicateUsername"


class BadDate(GridlingError):
    code = "BadDate"


class UnknownQos(GridlingError):
    code = "UnknownQos"


class SubmitRejected(GridlingError):
    """Submission refused; ``violation`` names the broken rule."""

    code = "SubmitRejected"

    def __init__(self, violation: str, message: str = ""):
        self.code = violation
        self.violation = violation
        super().__init__(message or violation)


class NotRunning(GridlingError):
    code = "NotRunning"


class AlreadyTerminal(GridlingError):
    code = "AlreadyTerminal"


class PermissionDenied(GridlingError):
    code = "PermissionDenied"


class UnknownJob(GridlingError):
    code = "UnknownJob"


# accounting
class InconsistentEvent(GridlingError):
    code = "InconsistentEvent"


class UnknownField(GridlingError):
    code = "UnknownField"


# protocol
class ProtocolError(GridlingError):
    code = "ProtocolError"


class IllegalCharacter(ProtocolError):
    code = "IllegalCharacter"


class BadTag(ProtocolError):
    code = "BadTag"


class ClockSkew(ProtocolError):
    code = "ClockSkew"


class Malformed(ProtocolError):
    code = "Malformed"


# sim / local execution
class MalformedScenario(GridlingError):
    code = "MalformedScenario"


class LaunchFailure(GridlingError):
    code = "LaunchFailure"


# planner
class MissingAttribute(GridlingError):
    code = "MissingAttribute"


class InvalidBuild(GridlingError):
    code = "InvalidBuild"
