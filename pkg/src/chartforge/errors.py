"""Exception types shared across the pipeline."""

from __future__ import annotations


class ChartforgeError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ChartforgeError):
    """A domain object or input value violates a structural invariant."""


class ContractViolation(ChartforgeError):
    """A model response or helper output broke an enforced stage contract."""


class IngestError(ChartforgeError):
    """A dataset directory could not be loaded."""


class GatewayError(ChartforgeError):
    """Base class for model-gateway failures."""


class TransportError(GatewayError):
    """Transient transport failure that survived all retry attempts."""


class AuthError(GatewayError):
    """Authentication rejected by the endpoint; never retried."""


class ContextLengthError(GatewayError):
    """Request rejected as too large for the endpoint; never retried."""


class StructuredParseError(GatewayError):
    """No schema-valid payload could be extracted, even after one repair.

    Carries the raw response text for postmortems.
    """

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class FixtureMissError(GatewayError):
    """A scripted backend had no rule matching the request."""


class FixtureExhaustedError(GatewayError):
    """A scripted backend ran out of canned responses."""


class ProposalShortfallError(ChartforgeError):
    """Fewer valid proposals than requested, even after the repair re-prompt.

    The valid subset is preserved so callers can decide whether to proceed.
    """

    def __init__(self, message: str, valid_proposals=()):
        super().__init__(message)
        self.valid_proposals = list(valid_proposals)


class AnnotationFailure(ChartforgeError):
    """Description or QA generation for one chart failed its contract.

    The chart stays retained; it is flagged unannotated.
    """


class InfrastructureError(ChartforgeError):
    """A failure of the harness itself (sandbox unreachable, disk trouble),
    as opposed to a candidate or dataset being rejected on its merits."""


class StoreError(ChartforgeError):
    """The corpus store refused an operation."""


class QuestionTypeParseError(ValidationError):
    """A question-type label did not match any known alias."""

    def __init__(self, label: str):
        super().__init__(f"unrecognized question type label: {label!r}")
        self.label = label
