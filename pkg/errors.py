class CrowdGaugeError(Exception):
    """Base class for every error raised by crowd-gauge."""


# Computation errors

class InfinitePrivacyLoss(CrowdGaugeError):
    """A response has zero probability under one truth value: the mechanism is not DP."""


class DegenerateMechanism(CrowdGaugeError):
    """The estimator is undefined for these coins (p = 0)."""


class UndefinedRelativeError(CrowdGaugeError):
    """Relative error needs a non-zero true count."""


class DegenerateCostModel(CrowdGaugeError):
    """Breakeven epsilon is undefined (base cost or private cohort is zero)."""


class InfeasibleScenario(CrowdGaugeError):
    """Scenario invariants cannot be satisfied."""


class InvalidEpsilonGrid(CrowdGaugeError, ValueError):
    """Epsilon grid is empty, non-positive or not strictly increasing."""


# Protocol errors. http_status is what the service answers with.

class ProtocolError(CrowdGaugeError):
    http_status = 400

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.__class__.__name__)
        self.detail = detail or self.__class__.__name__


class MalformedQuery(ProtocolError):
    http_status = 400


class InvalidSignature(ProtocolError):
    http_status = 401


class UnknownAnalyst(ProtocolError):
    http_status = 401


class ExpiredQuery(ProtocolError):
    http_status = 409


class UnknownQuery(ProtocolError):
    http_status = 404


class DuplicateNonce(ProtocolError):
    http_status = 409


class EpochClosed(ProtocolError):
    http_status = 409


class EpochStillOpen(ProtocolError):
    http_status = 409


class EpochOutOfRange(ProtocolError):
    http_status = 422


class PayloadMismatch(ProtocolError):
    http_status = 422


class AggregateNotFound(ProtocolError):
    http_status = 404


PROTOCOL_ERRORS = {
    cls.__name__: cls
    for cls in (
        MalformedQuery, InvalidSignature, UnknownAnalyst, ExpiredQuery, UnknownQuery,
        DuplicateNonce, EpochClosed, EpochStillOpen, EpochOutOfRange, PayloadMismatch,
        AggregateNotFound,
    )
}


def protocol_error_from_name(name: str, detail: str = "") -> ProtocolError:
    """Rebuilds a ProtocolError from the service's {"error", "detail"} body."""
    cls = PROTOCOL_ERRORS.get(name, ProtocolError)
    return cls(detail)
