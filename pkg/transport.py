"""TCP connections, atomic frame writes and the HELLO/TOPO bootstrap handshake."""
import asyncio
import contextlib
import logging
import socket
from typing import Awaitable, Callable, Iterable, List, Optional

from pydantic import BaseModel, Field, ValidationError

from config import Endpoint, JobConfig, Settings, config_digest, get_settings
from error_handlers import (DigestMismatchError, EmulationError, HandshakeError, HandshakeTimeoutError,
                            NetworkError, SessionError, retry_with_backoff)
from models import NodeRecord, PlanEntry
from topology import TopologyGraph, local_graph, verify_local_graph
from wire import HEADER_SIZE, Frame, MsgType, decode_header, encode_header

logger = logging.getLogger(__name__)

DIGEST_MISMATCH = "config digest mismatch"


class Connection:
    """One TCP connection carrying frames; writes of whole frames never interleave."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, max_payload: int):
        self.reader = reader
        self.writer = writer
        self.max_payload = max_payload
        self.errored = False
        self.peer = writer.get_extra_info("peername")
        self._write_lock = asyncio.Lock()
        sock = writer.get_extra_info("socket")
        if sock is not None and sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    async def send(self, frame: Frame) -> None:
        if self.errored and frame.msg_type == MsgType.DATA:
            raise SessionError("DATA after ERROR on the same connection")
        header = encode_header(frame, self.max_payload)
        async with self._write_lock:
            self.writer.write(header)
            if frame.payload:
                self.writer.write(frame.payload)
            await self.writer.drain()

    async def read_frame(self) -> Frame:
        try:
            raw = await self.reader.readexactly(HEADER_SIZE)
            header, payload_len = decode_header(raw, self.max_payload)
            payload = await self.reader.readexactly(payload_len) if payload_len else b""
        except asyncio.IncompleteReadError:
            raise SessionError(f"connection to {self.peer} closed by peer")
        except ConnectionError as e:
            raise SessionError(f"connection to {self.peer} lost: {e}")
        return header.model_copy(update={"payload": payload}) if payload else header

    async def send_error(self, reason: str) -> None:
        with contextlib.suppress(OSError, SessionError):
            await self.send(Frame(msg_type=MsgType.ERROR, payload=reason.encode("utf-8")))
        self.errored = True

    async def close(self) -> None:
        self.writer.close()
        with contextlib.suppress(OSError, ConnectionError):
            await self.writer.wait_closed()


class Hello(BaseModel):
    rank: int
    world_size: int
    digest: str
    role: str
    served_ranks: List[int] = Field(default_factory=list)


class Topo(BaseModel):
    nodes: List[NodeRecord] = Field(default_factory=list)
    plan: List[PlanEntry] = Field(default_factory=list)


class Session:
    """An established connection plus what each side declared during the handshake."""

    def __init__(self, conn: Connection, local: Hello, peer: Hello, peer_topo: Topo):
        self.conn = conn
        self.local = local
        self.peer = peer
        self.peer_topo = peer_topo
        self.bye_received = asyncio.Event()

    @property
    def peer_ranks(self) -> List[int]:
        return list(self.peer.served_ranks)

    @property
    def plan(self) -> List[PlanEntry]:
        return list(self.peer_topo.plan)

    async def close(self, wait_for_bye: float = 0.0) -> None:
        """Send BYE, optionally wait for the peer's BYE, then close the socket."""
        with contextlib.suppress(OSError, SessionError, EmulationError):
            await self.conn.send(Frame(msg_type=MsgType.BYE, src_rank=self.local.rank))
        if wait_for_bye > 0:
            with contextlib.suppress(asyncio.TimeoutError):
                await asyncio.wait_for(self.bye_received.wait(), wait_for_bye)
        await self.conn.close()


def error_reason(frame: Frame) -> str:
    return frame.payload.decode("utf-8", errors="replace")


async def _expect(conn: Connection, msg_type: MsgType) -> Frame:
    frame = await conn.read_frame()
    if frame.msg_type == MsgType.ERROR:
        reason = error_reason(frame)
        if reason == DIGEST_MISMATCH:
            raise DigestMismatchError(reason)
        raise HandshakeError(f"peer refused session: {reason}")
    if frame.msg_type != msg_type:
        raise HandshakeError(f"expected {msg_type.name}, got {frame.msg_type.name}")
    return frame


async def perform_handshake(
    conn: Connection,
    role: str,
    cfg: JobConfig,
    topo: TopologyGraph,
    served_ranks: Iterable[int],
    plan: Iterable[PlanEntry] = (),
    timeout: Optional[float] = None,
) -> Session:
    """
    Exchange HELLO then TOPO with the peer.

    Args:
        conn: Freshly established connection
        role: "real" or "emulator"
        cfg: Job configuration; its digest must match the peer's
        topo: Locally synthesized global topology
        served_ranks: Ranks this process answers for
        plan: Collective plan declared by a real rank
        timeout: Seconds before giving up (default from settings)

    Returns:
        Session: The established session

    Raises:
        DigestMismatchError: If the peers run different configurations
        HandshakeError: If the peer misbehaves or its local graph disagrees
        HandshakeTimeoutError: If the exchange does not finish in time
    """
    served = sorted(served_ranks)
    local = Hello(rank=served[0], world_size=cfg.world_size, digest=config_digest(cfg), role=role,
                  served_ranks=served)
    local_topo = Topo(nodes=local_graph(topo, served), plan=list(plan))

    async def exchange() -> Session:
        await conn.send(Frame(msg_type=MsgType.HELLO, src_rank=local.rank,
                              payload=local.model_dump_json().encode("utf-8")))
        peer = Hello.model_validate_json((await _expect(conn, MsgType.HELLO)).payload)
        if peer.digest != local.digest:
            await conn.send_error(DIGEST_MISMATCH)
            raise DigestMismatchError(f"{DIGEST_MISMATCH}: peer rank {peer.rank} world_size {peer.world_size}")
        await conn.send(Frame(msg_type=MsgType.TOPO, src_rank=local.rank,
                              payload=local_topo.model_dump_json().encode("utf-8")))
        peer_topo = Topo.model_validate_json((await _expect(conn, MsgType.TOPO)).payload)
        try:
            verify_local_graph(topo, peer_topo.nodes)
        except HandshakeError as e:
            await conn.send_error(str(e))
            raise
        return Session(conn, local, peer, peer_topo)

    timeout = get_settings().handshake_timeout_s if timeout is None else timeout
    try:
        session = await asyncio.wait_for(exchange(), timeout)
    except asyncio.TimeoutError:
        await conn.close()
        raise HandshakeTimeoutError(f"handshake with {conn.peer} timed out after {timeout}s")
    except ValidationError as e:
        await conn.send_error("malformed handshake payload")
        await conn.close()
        raise HandshakeError(f"malformed handshake payload: {e.errors()[0]['msg']}")
    except EmulationError:
        await conn.close()
        raise
    logger.info(f"Session established with rank(s) {session.peer_ranks} ({session.peer.role}) at {conn.peer}")
    return session


async def dial(endpoint: Endpoint, settings: Optional[Settings] = None) -> Connection:
    """Connect to an endpoint, retrying with backoff while the peer is still starting."""
    settings = settings or get_settings()

    @retry_with_backoff(
        max_retries=settings.connect_retries,
        initial_delay=settings.connect_initial_delay_s,
        max_delay=settings.connect_max_delay_s,
        retryable_exceptions=(NetworkError,),
    )
    async def _open() -> Connection:
        try:
            reader, writer = await asyncio.open_connection(endpoint.host, endpoint.port)
        except OSError as e:
            raise NetworkError(f"cannot reach {endpoint}: {e}")
        return Connection(reader, writer, settings.max_payload_bytes)

    return await _open()


async def listen(
    endpoint: Endpoint,
    on_connection: Callable[[Connection], Awaitable[None]],
    settings: Optional[Settings] = None,
) -> asyncio.AbstractServer:
    settings = settings or get_settings()

    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        await on_connection(Connection(reader, writer, settings.max_payload_bytes))

    try:
        server = await asyncio.start_server(handle, endpoint.host, endpoint.port)
    except OSError as e:
        raise NetworkError(f"cannot listen on {endpoint}: {e}")
    logger.info(f"Listening on {endpoint}")
    return server
