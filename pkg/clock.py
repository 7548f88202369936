"""Monotonic timestamps and busy-spin compute emulation."""
import time

GRANULARITY_US = 10
_SLEEP_THRESHOLD_US = 1000.0
_SPIN_TAIL_US = 500.0


def monotonic_us() -> float:
    """Monotonic clock in microseconds, truncated to 10 µs granularity."""
    ns = time.perf_counter_ns()
    return float(ns // (GRANULARITY_US * 1000) * GRANULARITY_US)


def precise_us() -> float:
    return time.perf_counter_ns() / 1000.0


def spin_for_us(duration_us: float) -> None:
    """
    Occupy the calling thread for `duration_us`.

    Short durations busy-spin; longer ones sleep and spin the tail. The spin
    yields the GIL every turn so a background I/O thread keeps making progress.
    """
    if duration_us <= 0:
        return
    deadline = precise_us() + duration_us
    if duration_us >= _SLEEP_THRESHOLD_US:
        time.sleep((duration_us - _SPIN_TAIL_US) / 1e6)
    while precise_us() < deadline:
        time.sleep(0)
