"""
Error Types
Every failure raised by the package carries a stable code that the CLI
turns into a structured error payload
"""

from typing import Any, Dict, Optional

from pydantic import BaseModel, Field


class ErrorPayload(BaseModel):
    """Structured error body printed by the CLI and written to error.json"""

    status: str = "error"
    error: str
    message: str
    context: Dict[str, Any] = Field(default_factory=dict)


class MixTSQLError(Exception):
    """Base class for all package errors"""

    code = "MixTSQLError"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context

    def payload(self) -> ErrorPayload:
        return ErrorPayload(error=self.code, message=self.message, context=self.context)

    def to_dict(self) -> Dict[str, Any]:
        # context values without a JSON form are written as strings
        return self.payload().model_dump(mode="json", fallback=str)


class IncompatibleLinkDomain(MixTSQLError):
    code = "IncompatibleLinkDomain"


class SeriesTooShort(MixTSQLError):
    code = "SeriesTooShort"


class DomainViolation(MixTSQLError):
    code = "DomainViolation"


class NonFinitePredictor(MixTSQLError):
    code = "NonFinitePredictor"


class SingularS2(MixTSQLError):
    code = "SingularS2"


class ZeroVarianceDenominator(MixTSQLError):
    code = "ZeroVarianceDenominator"


class InvalidReplicationCount(MixTSQLError):
    code = "InvalidReplicationCount"


class EmptyCrossLags(MixTSQLError):
    code = "EmptyCrossLags"


class QLRConvergenceError(MixTSQLError):
    code = "QLRConvergenceError"


class FamilyMismatch(MixTSQLError):
    code = "FamilyMismatch"


class FamilyDomainMismatch(MixTSQLError):
    code = "FamilyDomainMismatch"


class TruncationInsufficient(MixTSQLError):
    code = "TruncationInsufficient"


class ExplosivePath(MixTSQLError):
    code = "ExplosivePath"


class ConstantSeries(MixTSQLError):
    code = "ConstantSeries"


class ParseError(MixTSQLError):
    code = "ParseError"


class MissingColumn(MixTSQLError):
    code = "MissingColumn"


class InvalidTrainingWindow(MixTSQLError):
    code = "InvalidTrainingWindow"


class ConfigError(MixTSQLError):
    code = "ConfigError"


def error_code(exc: Optional[BaseException]) -> Optional[str]:
    """Short code for an exception, used when counting failed replications"""
    if exc is None:
        return None
    if isinstance(exc, MixTSQLError):
        return exc.code
    return type(exc).__name__
