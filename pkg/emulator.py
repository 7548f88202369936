"""The emulated environment: bitmap bookkeeping over boundary DAGs and the emulator server.

One process impersonates every emulated rank. For each collective the real
rank opens, the emulator registers an operation over the boundary DAG of that
collective, releases its own messages only once their boundary predecessors
are marked and their delay has elapsed, and checks every message the real
rank sends against the next one it expects. Payloads are never inspected;
outgoing messages carry zero bytes of the right size.
"""
import asyncio
import contextlib
import logging
import threading
from collections import deque
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from clock import monotonic_us, precise_us
from collective_dag import BoundaryDag, boundary_for, validate_acyclic
from config import Endpoint, JobConfig, Settings, get_settings
from delay_model import DelayModelParams, release_offsets
from error_handlers import EmulationError, InternalError, OutOfScopeError, ProtocolError
from models import Direction, MsgDesc, OpSummary, OpTrace, PlanEntry
from topology import ring_order, synthesize_global_topology
from transport import Connection, Session, error_reason, listen, perform_handshake
from wire import MsgType, data_frame, dummy_payload, frame_msg

logger = logging.getLogger(__name__)

ErrorSink = Callable[[int, EmulationError], None]


class OpState:
    """Bitmaps of one in-flight operation over its boundary DAG.

    ``sent`` covers to-real vertices, ``received`` covers from-real vertices.
    Messages are compared by :meth:`MsgDesc.key`, so one boundary template
    serves every operation of the same shape.
    """

    def __init__(self, op_id: int, boundary: BoundaryDag, offsets: Sequence[float], created_at: float,
                 plan_index: Optional[int] = None):
        self.op_id = op_id
        self.boundary = boundary
        self.plan_index = plan_index
        self.created_at = created_at
        self.sent = np.zeros(len(boundary), dtype=bool)
        self.received = np.zeros(len(boundary), dtype=bool)
        self.preds = boundary.predecessors()
        self.to_real = boundary.indices(Direction.TO_REAL)
        self.from_real = boundary.indices(Direction.FROM_REAL)
        if len(offsets) != len(self.to_real):
            raise InternalError(f"{len(offsets)} release offsets for {len(self.to_real)} to-real messages")
        self.release_not_before = [created_at + float(x) for x in offsets]
        # worst lateness of a release held back only by its deadline
        self.release_late_us = 0.0
        self.failed = False
        self.error: Optional[str] = None
        self.lock = threading.Lock()
        self._next_send = 0
        self._next_recv = 0

    def __len__(self) -> int:
        return len(self.boundary)

    def marked(self, index: int) -> bool:
        return bool(self.sent[index] or self.received[index])

    def ready(self, index: int) -> bool:
        return all(self.marked(p) for p in self.preds[index])

    @property
    def sent_count(self) -> int:
        return int(self.sent.sum())

    @property
    def received_count(self) -> int:
        return int(self.received.sum())

    def pending_deadline(self) -> Optional[float]:
        """Release time of the next to-real message if only the clock holds it back."""
        if self.failed or self._next_send >= len(self.to_real):
            return None
        if not self.ready(self.to_real[self._next_send]):
            return None
        return self.release_not_before[self._next_send]

    def _with_op(self, msg: MsgDesc) -> MsgDesc:
        return msg if msg.op_id == self.op_id else msg.model_copy(update={"op_id": self.op_id})

    def try_send(self, now: float) -> Optional[MsgDesc]:
        if self.failed or self._next_send >= len(self.to_real):
            return None
        index = self.to_real[self._next_send]
        if not self.ready(index) or self.release_not_before[self._next_send] > now:
            return None
        if not self.preds[index]:
            self.release_late_us = max(self.release_late_us, now - self.release_not_before[self._next_send])
        self.sent[index] = True
        self._next_send += 1
        return self._with_op(self.boundary.vertices[index].msg)

    def receive(self, msg: MsgDesc) -> None:
        if self.failed:
            raise ProtocolError(f"op {self.op_id} already failed: {self.error}")
        key = msg.key()
        for done in self.from_real[:self._next_recv]:
            if self.boundary.vertices[done].msg.key() == key:
                raise ProtocolError(f"op {self.op_id}: duplicate of step {msg.step} chunk {msg.chunk_index}",
                                    expected=None, actual=key)
        if self._next_recv >= len(self.from_real):
            raise ProtocolError(f"op {self.op_id}: unexpected message, every message was already received",
                                expected=None, actual=key)
        index = self.from_real[self._next_recv]
        want = self.boundary.vertices[index].msg
        if want.key() != key:
            raise ProtocolError(
                f"op {self.op_id}: expected step {want.step} chunk {want.chunk_index} "
                f"({want.src_rank}->{want.dst_rank}, {want.size_bytes} bytes), got step {msg.step} "
                f"chunk {msg.chunk_index} ({msg.src_rank}->{msg.dst_rank}, {msg.size_bytes} bytes)",
                expected=want.key(), actual=key,
            )
        if not self.ready(index):
            raise ProtocolError(f"op {self.op_id}: step {msg.step} arrived before the messages it depends on",
                                expected=want.key(), actual=key)
        self.received[index] = True
        self._next_recv += 1

    def is_complete(self) -> bool:
        return self._next_send == len(self.to_real) and self._next_recv == len(self.from_real)

    def summary(self) -> OpSummary:
        return OpSummary(op_id=self.op_id, plan_index=self.plan_index, created_us=self.created_at,
                         sent=self.sent_count, received=self.received_count,
                         to_real_total=len(self.to_real), from_real_total=len(self.from_real),
                         failed=self.failed)

    def trace(self, finished_at: float) -> OpTrace:
        return OpTrace(op_id=self.op_id, plan_index=self.plan_index, created_us=self.created_at,
                       finished_us=finished_at, sent=self.sent_count, received=self.received_count,
                       failed=self.failed, error=self.error,
                       release_late_us=self.release_late_us)


class Controller:
    """Registry of live operations, round-robin cursor and error sink."""

    def __init__(self, error_sink: Optional[ErrorSink] = None, trace_retention: int = 1024,
                 clock: Callable[[], float] = monotonic_us):
        self._ops: Dict[int, OpState] = {}
        self._lock = threading.Lock()
        self._cursor = 0
        self._next_id = 0
        self._clock = clock
        self.errors: List[Tuple[int, EmulationError]] = []
        self._sink = error_sink or (lambda op_id, error: self.errors.append((op_id, error)))
        self.traces: Deque[OpTrace] = deque(maxlen=trace_retention)
        self.completed = 0

    def __len__(self) -> int:
        return len(self._ops)

    def __contains__(self, op_id: int) -> bool:
        return op_id in self._ops

    def get(self, op_id: int) -> OpState:
        with self._lock:
            return self._ops[op_id]

    def register(self, boundary: BoundaryDag, offsets: Sequence[float], op_id: Optional[int] = None,
                 plan_index: Optional[int] = None, now: Optional[float] = None) -> int:
        if len(boundary) == 0:
            raise InternalError("cannot register an empty boundary")
        report = validate_acyclic(boundary)
        if not report.ok:
            raise InternalError(f"boundary DAG has a cycle through {report.cycle}")
        created = self._clock() if now is None else now
        with self._lock:
            if op_id is None:
                op_id = self._next_id
            if op_id in self._ops:
                raise InternalError(f"op_id {op_id} registered twice")
            self._ops[op_id] = OpState(op_id, boundary, offsets, created, plan_index)
            self._next_id = max(self._next_id, op_id + 1)
        logger.debug(f"Registered op {op_id} with {len(boundary)} boundary messages")
        return op_id

    def _retire(self, state: OpState, now: float) -> None:
        # caller holds self._lock
        if self._ops.pop(state.op_id, None) is None:
            return
        self.traces.append(state.trace(now))
        if not state.failed:
            self.completed += 1

    def poll(self, now: Optional[float] = None) -> List[Tuple[int, MsgDesc]]:
        now = self._clock() if now is None else now
        released: List[Tuple[int, MsgDesc]] = []
        with self._lock:
            states = list(self._ops.values())
            if not states:
                self._cursor = 0
                return released
            start = self._cursor % len(states)
            for state in states[start:] + states[:start]:
                with state.lock:
                    msg = state.try_send(now)
                    complete = state.is_complete()
                if msg is not None:
                    released.append((state.op_id, msg))
                if complete:
                    self._retire(state, now)
            live = len(self._ops)
            self._cursor = (start + 1) % live if live else 0
        return released

    def receive(self, msg: MsgDesc) -> bool:
        """Mark a message from the real rank; returns True if it completed its operation."""
        with self._lock:
            state = self._ops.get(msg.op_id)
        if state is None:
            raise ProtocolError(f"message for unknown op {msg.op_id}", expected=None, actual=msg.key())
        try:
            with state.lock:
                state.receive(msg)
                complete = state.is_complete()
        except ProtocolError as e:
            self.fail(msg.op_id, e)
            raise
        if complete:
            with self._lock:
                self._retire(state, self._clock())
        return complete

    def fail(self, op_id: int, error: EmulationError) -> None:
        with self._lock:
            state = self._ops.get(op_id)
            if state is None:
                return
            with state.lock:
                state.failed = True
                state.error = str(error)
            self._retire(state, self._clock())
        logger.error(f"Op {op_id} failed: {error}")
        self._sink(op_id, error)

    def abort_all(self, reason: str) -> None:
        with self._lock:
            op_ids = list(self._ops)
        for op_id in op_ids:
            self.fail(op_id, ProtocolError(reason))

    def next_deadline(self) -> Optional[float]:
        with self._lock:
            deadlines = [d for d in (s.pending_deadline() for s in self._ops.values()) if d is not None]
        return min(deadlines) if deadlines else None

    def summaries(self) -> List[OpSummary]:
        with self._lock:
            return [s.summary() for s in self._ops.values()]


def register_operation(ctrl: Controller, boundary: BoundaryDag, timing: Sequence[float],
                       op_id: Optional[int] = None) -> int:
    return ctrl.register(boundary, timing, op_id=op_id)


def try_send_to_real(state: OpState, now: float) -> Optional[MsgDesc]:
    """Next releasable message to the real rank, marked sent, or None."""
    with state.lock:
        return state.try_send(now)


def on_receive_from_real(state: OpState, msg: MsgDesc) -> None:
    """
    Check a message from the real rank against the next one expected.

    Raises:
        ProtocolError: On a wrong step, chunk, size or route, or a duplicate
    """
    with state.lock:
        state.receive(msg)


def poll_round_robin(ctrl: Controller, now: float) -> List[Tuple[int, MsgDesc]]:
    return ctrl.poll(now)


def is_complete(state: OpState) -> bool:
    return state.is_complete()


class EventLog:
    """One line per send/receive/complete/error: timestamp_us,op_id,event,step,chunk."""

    def __init__(self, path: Optional[str]):
        self._logger = logging.getLogger(f"{__name__}.events")
        self._handler: Optional[logging.Handler] = None
        if path:
            self._handler = logging.FileHandler(path, mode="w", encoding="utf-8")
            self._handler.setFormatter(logging.Formatter("%(message)s"))
            self._logger.addHandler(self._handler)
            self._logger.setLevel(logging.INFO)
            self._logger.propagate = False
            self._logger.info("timestamp_us,op_id,direction,step,chunk")

    @property
    def enabled(self) -> bool:
        return self._handler is not None

    def record(self, op_id: int, event: str, step: Optional[int] = None, chunk: Optional[int] = None) -> None:
        if self._handler is None:
            return
        step_s = "" if step is None else str(step)
        chunk_s = "" if chunk is None else str(chunk)
        self._logger.info(f"{int(monotonic_us())},{op_id},{event},{step_s},{chunk_s}")

    def close(self) -> None:
        if self._handler is not None:
            self._logger.removeHandler(self._handler)
            self._handler.close()
            self._handler = None


class EmulatorServer:
    """Serves every emulated rank to the single real rank, one session at a time."""

    def __init__(self, cfg: JobConfig, settings: Optional[Settings] = None,
                 listen_endpoint: Optional[Endpoint] = None, max_sessions: Optional[int] = None,
                 trace_path: Optional[str] = None):
        if len(cfg.real_ranks) != 1:
            raise OutOfScopeError(
                f"the emulator serves exactly one real rank, got {sorted(cfg.real_ranks)} (multiple real nodes)",
                field="real_ranks")
        self.cfg = cfg
        self.settings = settings or get_settings()
        self.topo = synthesize_global_topology(cfg)
        self.real_rank = next(iter(cfg.real_ranks))
        self.served = sorted(cfg.emulated_ranks)
        successor = ring_order(self.topo).successor(self.real_rank)
        self.listen_endpoint = listen_endpoint or cfg.endpoints[successor]
        self.max_sessions = max_sessions
        self.params = DelayModelParams.from_config(cfg)
        self.controller = Controller(trace_retention=self.settings.trace_retention)
        self.events = EventLog(trace_path or self.settings.trace)
        self.sessions_served = 0
        self.session_errors: List[str] = []
        self._templates: Dict[PlanEntry, Tuple[BoundaryDag, List[float]]] = {}
        self._active: Optional["EmulatorSession"] = None
        self._server: Optional[asyncio.AbstractServer] = None
        self._finished: Optional[asyncio.Event] = None

    def template(self, entry: PlanEntry) -> Tuple[BoundaryDag, List[float]]:
        """Boundary DAG and release offsets of one collective shape, built once."""
        cached = self._templates.get(entry)
        if cached is None:
            n = self.cfg.world_size
            boundary = boundary_for(entry, n, self.cfg.real_ranks, op_id=0, side="emulated")
            offsets = release_offsets(boundary, self.params, entry.kind, n, entry.nbytes)
            cached = self._templates[entry] = (boundary, offsets)
        return cached

    @property
    def active(self) -> bool:
        return self._active is not None

    async def start(self) -> None:
        self._finished = asyncio.Event()
        self._server = await listen(self.listen_endpoint, self._on_connection, self.settings)
        logger.info(f"Emulating ranks {self.served} for real rank {self.real_rank} on {self.listen_endpoint}")

    def request_stop(self) -> None:
        """Make serve/wait_finished return; call from the server's event loop."""
        if self._finished is not None:
            self._finished.set()

    async def wait_finished(self) -> None:
        await self._finished.wait()

    async def serve(self) -> None:
        await self.start()
        try:
            await self.wait_finished()
        finally:
            await self.stop()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            with contextlib.suppress(Exception):
                await self._server.wait_closed()
            self._server = None
        self.events.close()

    async def _on_connection(self, conn: Connection) -> None:
        try:
            session = await perform_handshake(conn, "emulator", self.cfg, self.topo, self.served,
                                              timeout=self.settings.handshake_timeout_s)
        except EmulationError as e:
            logger.warning(f"Handshake with {conn.peer} failed: {e}")
            return
        if session.peer_ranks != [self.real_rank] or self._active is not None:
            reason = "emulator busy" if self._active is not None else "unexpected peer"
            logger.warning(f"Refusing session from ranks {session.peer_ranks}: {reason}")
            await conn.send_error(reason)
            await conn.close()
            return
        self._active = EmulatorSession(self, session)
        try:
            await self._active.run()
        finally:
            self._active = None
            self.sessions_served += 1
            if self.max_sessions is not None and self.sessions_served >= self.max_sessions:
                self._finished.set()


class EmulatorSession:
    """Read loop plus round-robin poller for one connected real rank."""

    def __init__(self, server: EmulatorServer, session: Session):
        self.server = server
        self.session = session
        self.conn = session.conn
        self.controller = server.controller
        self.settings = server.settings
        self.plan: List[PlanEntry] = session.plan
        self._wake = asyncio.Event()
        self._closed = False
        self._timer_late_us = 0.0

    async def run(self) -> None:
        poller = asyncio.get_running_loop().create_task(self._poll_loop())
        try:
            await self._read_loop()
        except EmulationError as e:
            self.server.session_errors.append(str(e))
            logger.error(f"Session with rank {self.server.real_rank} failed: {e}")
            await self.conn.send_error(str(e))
        finally:
            self._closed = True
            self._wake.set()
            poller.cancel()
            with contextlib.suppress(asyncio.CancelledError, Exception):
                await poller
            self.controller.abort_all("session closed")
            if self.session.bye_received.is_set():
                await self.session.close()
            else:
                await self.conn.close()
            logger.info(f"Session with rank {self.server.real_rank} closed "
                        f"({self.controller.completed} operations completed so far)")

    async def _read_loop(self) -> None:
        while True:
            frame = await self.conn.read_frame()
            if frame.msg_type == MsgType.OPEN_OP:
                self._open(frame.op_id, frame.seq)
            elif frame.msg_type == MsgType.DATA:
                msg = frame_msg(frame)
                self.server.events.record(msg.op_id, Direction.FROM_REAL.value, msg.step, msg.chunk_index)
                try:
                    done = self.controller.receive(msg)
                except ProtocolError:
                    self.server.events.record(msg.op_id, "error", msg.step, msg.chunk_index)
                    raise
                if done:
                    self.server.events.record(msg.op_id, "complete")
            elif frame.msg_type == MsgType.BYE:
                self.session.bye_received.set()
                return
            elif frame.msg_type == MsgType.ERROR:
                raise ProtocolError(f"real rank reported error: {error_reason(frame)}")
            else:
                raise ProtocolError(f"unexpected {frame.msg_type.name} frame after handshake")
            self._wake.set()

    def _open(self, op_id: int, plan_index: int) -> None:
        if plan_index >= len(self.plan):
            raise ProtocolError(f"OPEN_OP for op {op_id} names plan entry {plan_index}, "
                                f"only {len(self.plan)} declared", expected=len(self.plan), actual=plan_index)
        if op_id in self.controller:
            raise ProtocolError(f"op {op_id} opened twice")
        boundary, offsets = self.server.template(self.plan[plan_index])
        self.controller.register(boundary, offsets, op_id=op_id, plan_index=plan_index)

    async def _poll_loop(self) -> None:
        period = self.settings.poll_period_us
        spin_window = self.settings.spin_window_us
        early = self.settings.early_wake_fraction
        while not self._closed:
            self._wake.clear()
            last_poll = precise_us()
            released = self.controller.poll()
            for op_id, msg in released:
                await self.conn.send(data_frame(msg, dummy_payload(msg.size_bytes)))
                self.server.events.record(op_id, Direction.TO_REAL.value, msg.step, msg.chunk_index)
                if op_id not in self.controller:
                    self.server.events.record(op_id, "complete")
            if released:
                await asyncio.sleep(0)
                continue
            deadline = self.controller.next_deadline()
            if deadline is None:
                await self._wake.wait()
                continue
            remaining = deadline - precise_us()
            # loop timers overshoot by up to a few ms: wake early by a margin that grows with the wait
            margin = spin_window + self._timer_late_us + early * remaining
            if remaining > margin:
                target = precise_us() + remaining - margin
                with contextlib.suppress(asyncio.TimeoutError):
                    await asyncio.wait_for(self._wake.wait(), (remaining - margin) / 1e6)
                if not self._wake.is_set():
                    self._timer_late_us = max(precise_us() - target, 0.9 * self._timer_late_us, 0.0)
                continue
            # event-loop timers are too coarse here: yield and re-poll
            while not self._wake.is_set() and precise_us() - last_poll < period:
                await asyncio.sleep(0)
            await asyncio.sleep(0)
