"""Exception hierarchy for FRACTI.

Every error carries the process exit code the CLI reports for it:
1 for user errors (bad arguments, unknown ids, denied access),
2 for integrity or determinism failures.
"""


class FractiError(Exception):
    """Base class for all FRACTI errors."""
    exit_code = 1


class IntegrityError(FractiError):
    """Stored data or a reproduction no longer matches its recorded hash."""
    exit_code = 2


# Canonical text

class CanonicalError(FractiError):
    """A value cannot be encoded to, or decoded from, canonical text."""


# Contribution store

class MalformedUri(FractiError):
    pass


class UriConflict(FractiError):
    """The URI is already bound to a different content hash."""


class EmptyPayload(FractiError):
    pass


class UnknownParent(FractiError):
    pass


class AccessDenied(FractiError):
    pass


class NotFound(FractiError):
    pass


class UnknownPrincipal(FractiError):
    pass


class DuplicatePrincipal(FractiError):
    pass


class StoreLocked(FractiError):
    """Another process holds the store's writer lock."""


# Flow

class ParseError(FractiError):
    """A text definition could not be parsed."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        location = f"line {line}, column {column}: " if line else ""
        super().__init__(f"{location}{message}")


class FlowSyntaxError(ParseError):
    pass


class UnknownNodeInEdge(FractiError):
    pass


class CycleDetected(FractiError):
    pass


class EmptyGraph(FractiError):
    pass


class ValidationFailed(FractiError):
    """A flow failed validation; `findings` lists every problem found."""

    def __init__(self, findings):
        self.findings = list(findings)
        summary = "; ".join(str(finding) for finding in self.findings)
        super().__init__(f"flow validation failed: {summary}")


class ProcessorFailure(FractiError):
    def __init__(self, node: str, cause: BaseException):
        self.node = node
        self.cause = cause
        super().__init__(f"processor at node '{node}' failed: {cause}")


class UnboundFragment(FractiError):
    """A fragment is not bound to the configuration being executed."""


class UnknownProcessor(FractiError):
    pass


# Reactives

class ExpressionSyntaxError(ParseError):
    pass


class DuplicateName(FractiError):
    pass


class UnknownName(FractiError):
    pass


class NotAPrimitive(FractiError):
    pass


class TickRegression(FractiError):
    pass


class Unset(FractiError):
    pass


class DivideByZero(FractiError):
    pass


class LagUnderflow(FractiError):
    pass


# Distribution

class InvalidWorkerCount(FractiError):
    pass


# Simulation

class InvalidParams(FractiError):
    pass


class EmptySeries(FractiError):
    pass


class InvalidShock(FractiError):
    pass


class InvalidExperiment(FractiError):
    pass


class MissingMetric(FractiError):
    pass


class EventOrderError(FractiError):
    pass


class MalformedSeries(FractiError):
    pass


# Meta-model

class IncompleteBindings(FractiError):
    pass


class UnknownFlow(FractiError):
    pass


class MissingInput(FractiError):
    pass


class IntegrityFailure(IntegrityError):
    pass


class HashMismatch(IntegrityError):
    """A reproduction produced a different output hash than the original run."""
