"""Exception types shared by every service.

Each error carries a short machine-readable ``code`` which the CLI and the
socket server report verbatim.
"""


class KGStreamError(Exception):
    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def describe(self) -> str:
        return f"{self.code}: {self.message}"


class MalformedTripleError(KGStreamError):
    code = "malformed-triple"


class MalformedQueryError(KGStreamError):
    code = "malformed-query"


class RuleSafetyError(KGStreamError):
    code = "rule-safety"


class ParseError(KGStreamError):
    code = "parse-error"

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = f"{source or '<input>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.source = source


class BuildError(KGStreamError):
    code = "build-error"


class CollaborationError(BuildError):
    code = "collaboration-rejected"


class UnmappedAttributeError(KGStreamError, KeyError):
    code = "unmapped-attribute"

    def __str__(self) -> str:
        return self.message


class UnknownResourceError(KGStreamError):
    code = "unknown-resource"


class OversizeError(KGStreamError):
    code = "oversize"


class PatternError(KGStreamError):
    code = "pattern-error"


class SchemaMismatchError(KGStreamError):
    code = "schema-mismatch"


class ReconstructionError(KGStreamError):
    code = "reconstruction-error"


class PipelineError(KGStreamError):
    code = "pipeline-error"


class BadRequestError(KGStreamError):
    code = "bad-request"


class NotFoundError(KGStreamError):
    code = "not-found"


class AccessDeniedError(KGStreamError):
    code = "access-denied"

    def __init__(self, message: str, denied: list[str] | None = None):
        super().__init__(message)
        self.denied = list(denied or [])


class FederationError(KGStreamError):
    code = "federation-error"

    def __init__(self, message: str, subplan: str | None = None):
        super().__init__(message)
        self.subplan = subplan


class BackendWriteError(KGStreamError):
    code = "backend-write"


class AuthFailedError(KGStreamError):
    code = "auth-failed"


class TokenExpiredError(KGStreamError):
    code = "token-expired"


class ServiceForbiddenError(KGStreamError):
    code = "service-forbidden"


class RateLimitedError(KGStreamError):
    code = "rate-limited"


class ServiceError(KGStreamError):
    code = "service-error"


class ConfigError(KGStreamError):
    code = "config-error"


def error_for_code(code: str, message: str = "") -> KGStreamError:
    """Rebuild an error reported by the server from its code."""
    pending = [KGStreamError]
    while pending:
        cls = pending.pop()
        if cls.code == code:
            return cls(message)
        pending.extend(cls.__subclasses__())
    error = KGStreamError(message)
    error.code = code
    return error
