import sys
import time
import traceback
from functools import wraps
from typing import Callable, Optional

from loguru import logger


class TimberDiffError(Exception):
    """Base exception for scan-to-CAD evaluation"""
    stage: Optional[str] = None


class IoError(TimberDiffError):
    """Raised when a file is missing, unreadable or unwritable"""
    pass


class ParseError(TimberDiffError):
    """Raised when a file does not parse under its declared format"""

    def __init__(self, message: str, line: Optional[int] = None, offset: Optional[int] = None):
        self.line = line
        self.offset = offset
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class InvalidParameter(TimberDiffError):
    """Raised when an operation parameter is out of range"""
    pass


class MissingNormals(TimberDiffError):
    """Raised when an operation needs normals the cloud does not carry"""
    pass


class DegenerateNeighborhood(TimberDiffError):
    """Raised in strict mode when a neighbourhood cannot define a normal"""
    pass


class SemanticError(TimberDiffError):
    """Raised when a CAD file breaks the assembly hierarchy rules"""
    pass


class NotApplicable(TimberDiffError):
    """Raised when an operation does not apply to its input"""
    pass


class InsufficientPoints(TimberDiffError):
    """Raised when a cloud is too small for the requested operation"""
    pass


class NoConsensus(TimberDiffError):
    """Raised when RANSAC finds no model above the fitness floor"""
    pass


class NoCorrespondences(TimberDiffError):
    """Raised when ICP finds no pair within the correspondence cap"""
    pass


class DegenerateConfiguration(TimberDiffError):
    """Raised when point pairs cannot determine a rigid transform"""
    pass


class EmptyTarget(TimberDiffError):
    """Raised when a distance query has nothing to measure against"""
    pass


class EmptyInput(TimberDiffError):
    """Raised when statistics are requested over no values"""
    pass


class LengthMismatch(TimberDiffError):
    """Raised when parallel arrays disagree in length"""
    pass


class PreconditionError(TimberDiffError):
    """Raised when a pipeline input does not meet its precondition"""
    pass


class JointNotDetected(TimberDiffError):
    """Raised when no scan point could be extracted for a joint"""
    pass


class RegistrationFailed(TimberDiffError):
    """Raised when T1 cannot be estimated; carries the diagnostic dump location"""

    def __init__(self, message: str, diagnostic_path: Optional[str] = None):
        self.diagnostic_path = diagnostic_path
        super().__init__(message)


class ErrorContext:
    """Context manager tagging errors with the pipeline stage they came from"""

    def __init__(self, stage: str, entity: str = None):
        self.stage = stage
        self.entity = entity
        self.start_time = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            return False

        duration = time.perf_counter() - self.start_time
        context_info = {
            "stage": self.stage,
            "duration": f"{duration:.2f}s",
            "entity": self.entity,
        }

        if isinstance(exc_val, TimberDiffError):
            if exc_val.stage is None:
                exc_val.stage = self.stage
            logger.error(
                f"Stage '{self.stage}' failed: {exc_val}",
                extra={"context": context_info}
            )
        else:
            logger.error(
                f"Unexpected error in stage '{self.stage}': {exc_val}\n{traceback.format_exc()}",
                extra={"context": context_info}
            )
        return False


def handle_cli_errors(func: Callable) -> Callable:
    """Decorator turning domain errors into exit code 2 with a message on stderr"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except RegistrationFailed as e:
            where = f" (diagnostics in {e.diagnostic_path})" if e.diagnostic_path else ""
            print(f"error: registration failed: {e}{where}", file=sys.stderr)
            return 2
        except TimberDiffError as e:
            tag = f"[{e.stage}] " if e.stage else ""
            print(f"error: {tag}{type(e).__name__}: {e}", file=sys.stderr)
            return 2

    return wrapper
