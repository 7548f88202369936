import asyncio
import contextlib
import socket
import threading
from typing import Callable, Iterator, List, Optional

import pytest
import pytest_asyncio

from collective_dag import BoundaryDag, boundary_for
from config import JobConfig, Settings, parse_job_config
from emulator import Controller, EmulatorServer
from models import OpKind, PlanEntry


def free_ports(count: int) -> List[int]:
    """Distinct ports that were free a moment ago."""
    sockets = []
    try:
        for _ in range(count):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind(("127.0.0.1", 0))
            sockets.append(s)
        return [s.getsockname()[1] for s in sockets]
    finally:
        for s in sockets:
            s.close()


def config_text(world_size: int, real_ranks: str = "0", extra: str = "", ports: Optional[List[int]] = None) -> str:
    ports = ports or free_ports(world_size)
    lines = [f"world_size={world_size}", f"real_ranks={real_ranks}", "node_class=default"]
    lines += [f"endpoint.{rank}=127.0.0.1:{port}" for rank, port in enumerate(ports)]
    return "\n".join(lines) + "\n" + extra


@pytest.fixture
def make_config() -> Callable[..., JobConfig]:
    def _make(world_size: int = 2, real_ranks: str = "0", extra: str = "") -> JobConfig:
        return parse_job_config(config_text(world_size, real_ranks, extra))
    return _make


@pytest.fixture
def test_settings() -> Settings:
    return Settings(
        handshake_timeout_s=5.0,
        connect_retries=60,
        connect_initial_delay_s=0.01,
        connect_max_delay_s=0.1,
        trace_retention=16,
        child_timeout_s=120.0,
    )


@pytest.fixture
def boundary_factory() -> Callable[..., BoundaryDag]:
    cache = {}

    def _make(n: int, kind: OpKind = OpKind.ALLREDUCE, nbytes: Optional[int] = None) -> BoundaryDag:
        key = (n, kind, nbytes)
        if key not in cache:
            entry = PlanEntry(kind=kind, nbytes=nbytes if nbytes is not None else 4 * n)
            cache[key] = boundary_for(entry, n, {0})
        return cache[key]
    return _make


class FakeClock:
    def __init__(self, start: float = 1000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, us: float) -> float:
        self.now += us
        return self.now


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def controller(fake_clock) -> Controller:
    return Controller(trace_retention=8, clock=fake_clock)


@pytest_asyncio.fixture
async def emulator_server(make_config, test_settings):
    """Factory for emulators running on the test's event loop; stopped on teardown."""
    servers: List[EmulatorServer] = []

    async def _start(cfg: JobConfig, **kwargs) -> EmulatorServer:
        server = EmulatorServer(cfg, test_settings, **kwargs)
        await server.start()
        servers.append(server)
        return server

    yield _start
    for server in servers:
        server.request_stop()
        await server.stop()


@contextlib.contextmanager
def emulator_in_thread(cfg: JobConfig, settings: Settings, **kwargs) -> Iterator[EmulatorServer]:
    """An emulator on its own event loop thread, for tests that drive blocking WorkerSessions."""
    server = EmulatorServer(cfg, settings, **kwargs)
    loop = asyncio.new_event_loop()
    started = threading.Event()

    async def _main() -> None:
        await server.start()
        started.set()
        try:
            await server.wait_finished()
        finally:
            await server.stop()

    thread = threading.Thread(target=lambda: loop.run_until_complete(_main()), daemon=True)
    thread.start()
    if not started.wait(10):
        raise RuntimeError("emulator did not start")
    try:
        yield server
    finally:
        loop.call_soon_threadsafe(server.request_stop)
        thread.join(10)
        loop.close()


@pytest.fixture
def threaded_emulator(test_settings) -> Callable[..., contextlib.AbstractContextManager]:
    def _run(cfg: JobConfig, **kwargs):
        return emulator_in_thread(cfg, test_settings, **kwargs)
    return _run
