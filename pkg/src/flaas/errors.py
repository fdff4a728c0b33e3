"""Exception types shared across the stack.

Each class carries a stable ``code`` string that the HTTP layer puts on the
wire and the client maps back to the same exception type.
"""


class FlaasError(Exception):
    code = "error"


class InvalidInput(FlaasError, ValueError):
    """Caller violated an operation precondition or a type invariant."""

    code = "invalid-input"


class DecodeError(InvalidInput):
    """Binary model payload is truncated or inconsistent with its header."""

    code = "decode-error"


class ParseError(InvalidInput):
    """Text artifact (dataset file, config) failed to parse."""

    code = "parse-error"


class CapacityError(InvalidInput):
    """Partition spec asks for more samples than a class can supply."""

    code = "capacity-error"


class AggregationError(FlaasError, RuntimeError):
    """FedAvg cannot produce a result (no models, or zero total weight)."""

    code = "aggregation-impossible"


class DivergenceError(FlaasError, RuntimeError):
    """Training produced a non-finite loss."""

    code = "numerical-divergence"


class AuthExpired(FlaasError):
    code = "auth-expired"


class AuthInvalid(FlaasError):
    code = "auth-invalid"


class NotFound(FlaasError):
    code = "not-found"


class Conflict(FlaasError):
    code = "conflict"


class AlreadyFinal(Conflict):
    code = "already-final"


class RoundClosed(Conflict):
    code = "round-closed"


class NotInvited(Conflict):
    code = "not-invited"


class NotJoined(Conflict):
    code = "not-joined"


class DuplicateSubmission(Conflict):
    code = "duplicate-submission"


WIRE_ERRORS = {
    cls.code: cls
    for cls in (
        InvalidInput,
        DecodeError,
        ParseError,
        CapacityError,
        AggregationError,
        DivergenceError,
        AuthExpired,
        AuthInvalid,
        NotFound,
        Conflict,
        AlreadyFinal,
        RoundClosed,
        NotInvited,
        NotJoined,
        DuplicateSubmission,
    )
}
