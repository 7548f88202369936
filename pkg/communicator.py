"""Ring collectives executed by a real rank.

The same code runs on the real node and on baseline peers: a rank dials its
successor's endpoint and accepts its predecessor, unless the peer it dialed
also answers for the predecessor (an emulator serving every emulated rank),
in which case that one connection carries both directions. Baseline peers
always use two one-way connections, even when n=2.
"""
import asyncio
import contextlib
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

import numpy as np

from collective_dag import chunk_layout, recv_chunk, reduces_at, schedule_positions, send_chunk
from config import Endpoint, JobConfig, Settings, get_settings
from error_handlers import EmulationError, HandshakeError, ProtocolError, SessionError, UsageError
from models import OpKind, PlanEntry
from topology import ring_order, synthesize_global_topology
from transport import Connection, Session, dial, error_reason, listen, perform_handshake
from wire import Frame, MsgType

logger = logging.getLogger(__name__)

_Item = Union[Frame, BaseException]


class RingCommunicator:
    def __init__(
        self,
        cfg: JobConfig,
        rank: int,
        plan: Iterable[PlanEntry],
        settings: Optional[Settings] = None,
        listen_endpoint: Optional[Endpoint] = None,
        connect_endpoint: Optional[Endpoint] = None,
    ):
        self.cfg = cfg
        self.rank = rank
        self.plan: List[PlanEntry] = list(plan)
        self.settings = settings or get_settings()
        self.topo = synthesize_global_topology(cfg)
        ring = ring_order(self.topo)
        self.successor = ring.successor(rank)
        self.predecessor = ring.predecessor(rank)
        self.listen_endpoint = listen_endpoint or cfg.endpoints[rank]
        self.connect_endpoint = connect_endpoint or cfg.endpoints[self.successor]

        self._plan_index: Dict[PlanEntry, int] = {}
        for i, entry in enumerate(self.plan):
            self._plan_index.setdefault(entry, i)
        self._sessions: List[Session] = []
        self._send_session: Optional[Session] = None
        self._pred_ready: Optional[asyncio.Future] = None
        self._server: Optional[asyncio.AbstractServer] = None
        self._readers: List[asyncio.Task] = []
        self._queues: Dict[Tuple[int, int], asyncio.Queue] = defaultdict(asyncio.Queue)
        self._departed: Set[int] = set()
        self._error: Optional[BaseException] = None
        self._closing = False

    async def start(self) -> None:
        """Open the ring links; returns once both the successor and predecessor are reachable."""
        self._pred_ready = asyncio.get_running_loop().create_future()
        self._server = await listen(self.listen_endpoint, self._on_inbound, self.settings)
        try:
            conn = await dial(self.connect_endpoint, self.settings)
            session = await perform_handshake(conn, "real", self.cfg, self.topo, [self.rank], self.plan,
                                              self.settings.handshake_timeout_s)
            if self.successor not in session.peer_ranks:
                await session.conn.send_error("unexpected peer")
                raise HandshakeError(f"endpoint {self.connect_endpoint} answered for ranks "
                                     f"{session.peer_ranks}, expected rank {self.successor}")
            self._adopt(session)
            self._send_session = session
            # an emulator never dials back: its one connection carries both directions
            if session.peer.role == "emulator" and self.predecessor in session.peer_ranks:
                self._pred_ready.set_result(session)
            budget = self.settings.connect_retries * self.settings.connect_max_delay_s + \
                self.settings.handshake_timeout_s
            try:
                await asyncio.wait_for(asyncio.shield(self._pred_ready), budget)
            except asyncio.TimeoutError:
                raise HandshakeError(f"rank {self.predecessor} never connected to {self.listen_endpoint}")
        finally:
            self._server.close()

    async def _on_inbound(self, conn: Connection) -> None:
        try:
            session = await perform_handshake(conn, "real", self.cfg, self.topo, [self.rank], self.plan,
                                              self.settings.handshake_timeout_s)
        except EmulationError as e:
            logger.warning(f"Rejected inbound connection from {conn.peer}: {e}")
            return
        if self.predecessor not in session.peer_ranks or self._pred_ready.done():
            await session.conn.send_error("unexpected peer")
            await session.conn.close()
            return
        self._adopt(session)
        self._pred_ready.set_result(session)

    def _adopt(self, session: Session) -> None:
        self._sessions.append(session)
        self._readers.append(asyncio.get_running_loop().create_task(self._read_loop(session)))

    async def _read_loop(self, session: Session) -> None:
        try:
            while True:
                frame = await session.conn.read_frame()
                if frame.msg_type == MsgType.DATA:
                    self._queues[(frame.op_id, frame.src_rank)].put_nowait(frame)
                elif frame.msg_type == MsgType.OPEN_OP:
                    logger.debug(f"Peer opened op {frame.op_id} (plan entry {frame.seq})")
                elif frame.msg_type == MsgType.BYE:
                    session.bye_received.set()
                    self._depart(session.peer_ranks)
                    return
                elif frame.msg_type == MsgType.ERROR:
                    raise ProtocolError(f"peer reported error: {error_reason(frame)}")
                else:
                    raise ProtocolError(f"unexpected {frame.msg_type.name} frame after handshake")
        except asyncio.CancelledError:
            raise
        except (EmulationError, OSError) as e:
            if not self._closing:
                self._fail(e)

    def _depart(self, ranks: Iterable[int]) -> None:
        error = SessionError("peer closed the session")
        for rank in ranks:
            self._departed.add(rank)
            for (_, src), queue in self._queues.items():
                if src == rank:
                    queue.put_nowait(error)

    def _fail(self, error: BaseException) -> None:
        logger.error(f"Rank {self.rank} session failed: {error}")
        self._error = error
        for queue in self._queues.values():
            queue.put_nowait(error)

    async def _next_frame(self, op_id: int, src: int) -> Frame:
        if self._error is not None:
            raise self._error
        queue = self._queues[(op_id, src)]
        if src in self._departed and queue.empty():
            raise SessionError(f"rank {src} left before op {op_id} finished")
        item: _Item = await queue.get()
        if isinstance(item, BaseException):
            raise item
        return item

    def plan_index(self, entry: PlanEntry) -> int:
        try:
            return self._plan_index[entry]
        except KeyError:
            raise UsageError(f"{entry.kind.value} of {entry.nbytes} bytes was not declared in the collective plan")

    async def run(self, op_id: int, kind: OpKind, array: np.ndarray) -> np.ndarray:
        """
        Execute one ring collective.

        All-reduce sums into `array` in place and returns it; all-gather returns
        a new array holding every rank's contribution in rank order.

        Raises:
            UsageError: If the collective shape was not declared in the plan
            ProtocolError: If a peer sends an unexpected message
            SessionError: If a peer disappears
        """
        if self._send_session is None:
            raise UsageError("communicator not started")
        flat = array.reshape(-1)
        if not np.shares_memory(flat, array):
            raise UsageError("collective buffers must be contiguous")
        entry = PlanEntry(kind=kind, nbytes=flat.nbytes, itemsize=flat.itemsize)
        index = self.plan_index(entry)
        n = self.cfg.world_size
        bounds = chunk_layout(kind, n, entry.nbytes, entry.itemsize)
        if kind == OpKind.ALLREDUCE:
            buf = flat
        else:
            buf = np.empty(n * flat.size, dtype=flat.dtype)
            lo, hi = bounds[self.rank]
            buf[lo:hi] = flat

        conn = self._send_session.conn
        await conn.send(Frame(msg_type=MsgType.OPEN_OP, op_id=op_id, seq=index, src_rank=self.rank,
                              dst_rank=self.successor))
        for p in range(schedule_positions(kind, n)):
            chunk = send_chunk(kind, n, self.rank, p)
            lo, hi = bounds[chunk]
            await conn.send(Frame(msg_type=MsgType.DATA, op_id=op_id, seq=p, src_rank=self.rank,
                                  dst_rank=self.successor, chunk_index=chunk, payload=buf[lo:hi].tobytes()))

            frame = await self._next_frame(op_id, self.predecessor)
            expected = recv_chunk(kind, n, self.rank, p)
            lo, hi = bounds[expected]
            size = (hi - lo) * entry.itemsize
            if (frame.seq, frame.chunk_index, frame.payload_len, frame.dst_rank) != (p, expected, size, self.rank):
                raise ProtocolError(
                    f"op {op_id}: expected step {p} chunk {expected} ({size} bytes), "
                    f"got step {frame.seq} chunk {frame.chunk_index} ({frame.payload_len} bytes)",
                    expected=(p, expected, size), actual=(frame.seq, frame.chunk_index, frame.payload_len),
                )
            incoming = np.frombuffer(frame.payload, dtype=buf.dtype)
            if reduces_at(kind, n, p):
                buf[lo:hi] += incoming
            else:
                buf[lo:hi] = incoming
        self._queues.pop((op_id, self.predecessor), None)
        return buf

    async def close(self) -> None:
        self._closing = True
        await asyncio.gather(*(s.close(wait_for_bye=self.settings.handshake_timeout_s) for s in self._sessions),
                             return_exceptions=True)
        for task in self._readers:
            task.cancel()
        for task in self._readers:
            with contextlib.suppress(asyncio.CancelledError, Exception):
                await task
