import asyncio
from functools import wraps
import logging
from typing import Any, Callable, Optional, Tuple, Type
from fastapi import HTTPException

logger = logging.getLogger(__name__)


class EmulationError(Exception):
    """Base exception class for every error raised by the emulation engine."""
    pass


class ConfigError(EmulationError, ValueError):
    """Raised when a job configuration cannot be used.

    Carries the name of the offending configuration field so CLI output
    points straight at the broken key.
    """

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ConfigParseError(ConfigError):
    """Raised when the configuration document is malformed."""
    pass


class ConfigValidationError(ConfigError):
    """Raised when a parsed configuration violates an invariant."""
    pass


class OutOfScopeError(ConfigValidationError):
    """Raised for configurations describing scenarios the engine does not emulate."""
    pass


class DagError(EmulationError, ValueError):
    """Raised for invalid collective DAG parameters (world size, sizes, rank sets)."""
    pass


class DelayModelError(EmulationError, ValueError):
    """Raised when a delay model is unknown or given invalid parameters."""
    pass


class FrameError(EmulationError):
    """Base class for wire framing errors."""
    pass


class BadMagicError(FrameError):
    pass


class BadVersionError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class PayloadTooLargeError(FrameError):
    pass


class ProtocolError(EmulationError):
    """Raised when a peer sends a message the collective schedule does not expect.

    `expected` and `actual` describe the message that was due and the one
    that arrived; either may be None when not applicable.
    """

    def __init__(self, message: str, expected: Any = None, actual: Any = None):
        self.expected = expected
        self.actual = actual
        super().__init__(message)


class HandshakeError(EmulationError):
    """Raised when session bootstrap fails."""
    pass


class DigestMismatchError(HandshakeError):
    pass


class HandshakeTimeoutError(HandshakeError):
    pass


class SessionError(EmulationError):
    """Raised when an established session breaks (peer closed, ERROR frame, BYE)."""
    pass


class UsageError(EmulationError):
    """Raised when the API is used incorrectly (unknown handle, undeclared collective)."""
    pass


class InternalError(EmulationError):
    """Raised for states that indicate a bug in the engine itself."""
    pass


class RetryableError(EmulationError):
    """Base class for errors that can be retried."""
    pass


class NetworkError(RetryableError):
    """Raised when network operations fail"""
    pass


class AcceptanceError(EmulationError):
    """Raised when a benchmark run completes but misses its acceptance threshold."""
    pass


def retry_with_backoff(
    max_retries: int = 3,
    initial_delay: float = 0.05,
    max_delay: float = 1.0,
    backoff_factor: float = 2.0,
    retryable_exceptions: Tuple[Type[Exception], ...] = (NetworkError,)
) -> Callable:
    """
    Decorator that redials a peer until its listener accepts the connection.

    Ranks of a job start in any order, so a refused dial is retried with a
    delay that doubles after every refusal, capped at `max_delay`.

    Args:
        max_retries: Redials after the first attempt before giving up
        initial_delay: Delay before the first redial in seconds
        max_delay: Upper bound on the delay between redials in seconds
        backoff_factor: Factor applied to the delay after each refusal
        retryable_exceptions: Dial failures that trigger a redial

    Returns:
        Callable: Decorated dialing coroutine
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        async def wrapper(*args: Any, **kwargs: Any) -> Any:
            delay = initial_delay
            for attempt in range(max_retries + 1):
                try:
                    return await func(*args, **kwargs)
                except retryable_exceptions as e:
                    if attempt == max_retries:
                        logger.error(f"Giving up on peer after {max_retries + 1} dials: {e}")
                        raise
                    logger.debug(f"Peer not reachable yet (dial {attempt + 1}/{max_retries + 1}): {e}; "
                                 f"redialing in {delay:.2f}s")
                    await asyncio.sleep(delay)
                    delay = min(delay * backoff_factor, max_delay)

        return wrapper

    return decorator


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the process exit code used by the CLI.

    Args:
        error: The exception that terminated the command

    Returns:
        int: 2 config/usage, 3 protocol/handshake/framing, 4 network/session,
        5 failed acceptance check, 1 anything else
    """
    if isinstance(error, (ConfigError, UsageError, DagError, DelayModelError)):
        return 2
    elif isinstance(error, (ProtocolError, HandshakeError, FrameError)):
        return 3
    elif isinstance(error, (NetworkError, SessionError, OSError)):
        return 4
    elif isinstance(error, AcceptanceError):
        return 5
    else:
        return 1


def handle_api_error(error: Exception) -> HTTPException:
    """
    Convert exceptions to appropriate HTTP responses for the status API.

    Args:
        error: The exception to handle

    Returns:
        HTTPException: Appropriate HTTP exception
    """
    if isinstance(error, KeyError):
        return HTTPException(status_code=404, detail=f"Unknown operation {error.args[0]}")
    elif isinstance(error, (UsageError, ValueError)):
        return HTTPException(status_code=400, detail=str(error))
    else:
        logger.error(f"Unhandled error: {str(error)}")
        return HTTPException(status_code=500, detail="Internal server error")
