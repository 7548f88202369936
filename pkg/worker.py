"""Synthetic data-parallel training on the real rank.

Model specs are JSON documents::

    {
      "name": "tiny",
      "layers": [{"forward_us": 100, "backward_us": 200, "grad_bytes": 65536}],
      "iterations": 60,
      "warmup_iterations": 10,
      "bucket_bytes": 262144,   # optional, overrides the job config
      "update_us": 0            # optional post-backward phase
    }

or the name of a shipped profile (see PROFILES). The harness does not know
whether its peers are real or emulated: that is decided by the endpoints in
the job configuration alone.
"""
import asyncio
import concurrent.futures
import itertools
import json
import logging
import math
import threading
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from clock import monotonic_us, precise_us, spin_for_us
from communicator import RingCommunicator
from config import Endpoint, JobConfig, Settings, get_settings
from error_handlers import AcceptanceError, ConfigValidationError, SessionError, UsageError
from models import BucketTiming, IterationTrace, OpKind, PlanEntry

logger = logging.getLogger(__name__)

GRAD_DTYPE = np.float32
VERIFY_DTYPE = np.int64
VERIFY_GATHER_COUNTS = (1, 3)
KiB = 1024


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    forward_us: float = Field(default=0.0, ge=0)
    backward_us: float = Field(default=0.0, ge=0)
    grad_bytes: int = Field(default=0, ge=0)


class ModelSpec(BaseModel):
    name: str = "custom"
    layers: List[LayerSpec]
    iterations: int = Field(default=60, ge=1)
    warmup_iterations: int = Field(default=10, ge=0)
    bucket_bytes: Optional[int] = Field(default=None, gt=0)
    update_us: float = Field(default=0.0, ge=0)

    @field_validator("layers")
    @classmethod
    def validate_layers(cls, v: List[LayerSpec]) -> List[LayerSpec]:
        if not v:
            raise ValueError("a model needs at least one layer")
        itemsize = np.dtype(GRAD_DTYPE).itemsize
        for i, layer in enumerate(v):
            if layer.grad_bytes % itemsize:
                raise ValueError(f"layer {i}: grad_bytes must be a multiple of {itemsize}")
        return v

    @property
    def compute_us(self) -> float:
        return sum(layer.forward_us + layer.backward_us for layer in self.layers) + self.update_us

    @property
    def grad_bytes(self) -> int:
        return sum(layer.grad_bytes for layer in self.layers)


def _uniform(name: str, count: int, forward_us: float, backward_us: float, grad_bytes: int,
             bucket_bytes: int) -> ModelSpec:
    layer = LayerSpec(forward_us=forward_us, backward_us=backward_us, grad_bytes=grad_bytes)
    return ModelSpec(name=name, layers=[layer] * count, bucket_bytes=bucket_bytes)


PROFILES: Dict[str, ModelSpec] = {
    # one layer per bucket, 2 ms of backward compute per bucket
    "bert-like": _uniform("bert-like", 4, 1000.0, 2000.0, 256 * KiB, 256 * KiB),
    "small": _uniform("small", 2, 500.0, 1000.0, 128 * KiB, 1024 * KiB),
    "wide": _uniform("wide", 16, 125.0, 250.0, 64 * KiB, 64 * KiB),
}


def load_model_spec(source: Union[str, Path]) -> ModelSpec:
    """
    Resolve a profile name or read a ModelSpec JSON file.

    Raises:
        ConfigValidationError: If the file is missing or does not describe a valid model
    """
    name = str(source)
    if name in PROFILES:
        return PROFILES[name].model_copy(deep=True)
    path = Path(source)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigValidationError(f"no profile or file named {name!r}; profiles: {sorted(PROFILES)}",
                                    field="model")
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})", field="model")
    try:
        spec = ModelSpec.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(part) for part in first["loc"]) or "model"
        raise ConfigValidationError(first["msg"], field=loc)
    if spec.name == "custom":
        spec.name = path.stem
    return spec


class Bucket(BaseModel):
    """Layers whose gradients are all-reduced together, in backward order."""
    model_config = ConfigDict(frozen=True)

    bucket_id: int
    layers: Tuple[int, ...]
    nbytes: int

    @property
    def last_layer(self) -> int:
        return self.layers[-1]


def bucketize(model: ModelSpec, bucket_bytes: Optional[float]) -> List[Bucket]:
    """
    Greedy bucketing in reverse layer order.

    A bucket closes when the next layer would push it past `bucket_bytes`; a
    layer larger than `bucket_bytes` ends up alone. None or infinity puts
    every layer in one bucket.
    """
    cap = math.inf if bucket_bytes is None else bucket_bytes
    if cap <= 0:
        raise UsageError(f"bucket_bytes must be positive, got {bucket_bytes}")
    groups: List[List[int]] = []
    current: List[int] = []
    size = 0
    for index in reversed(range(len(model.layers))):
        grad = model.layers[index].grad_bytes
        if current and size + grad > cap:
            groups.append(current)
            current, size = [], 0
        current.append(index)
        size += grad
    if current:
        groups.append(current)
    return [
        Bucket(bucket_id=i, layers=tuple(group), nbytes=sum(model.layers[j].grad_bytes for j in group))
        for i, group in enumerate(groups)
    ]


def effective_bucket_bytes(cfg: JobConfig, model: ModelSpec) -> int:
    return model.bucket_bytes or cfg.bucket_bytes


def training_plan(cfg: JobConfig, model: ModelSpec) -> List[PlanEntry]:
    """Distinct collective shapes the training loop will issue, in first-use order."""
    itemsize = np.dtype(GRAD_DTYPE).itemsize
    plan: List[PlanEntry] = []
    for bucket in bucketize(model, effective_bucket_bytes(cfg, model)):
        entry = PlanEntry(kind=OpKind.ALLREDUCE, nbytes=bucket.nbytes, itemsize=itemsize)
        if bucket.nbytes and entry not in plan:
            plan.append(entry)
    return plan


def microbench_sizes(n: int, size_bytes: int) -> int:
    """Per-rank all-gather contribution for a total gathered size."""
    return max(1, size_bytes // n)


def microbench_plan(cfg: JobConfig, sizes: Sequence[int]) -> List[PlanEntry]:
    plan: List[PlanEntry] = []
    for size in sizes:
        plan.append(PlanEntry(kind=OpKind.ALLREDUCE, nbytes=size))
        plan.append(PlanEntry(kind=OpKind.ALLGATHER, nbytes=microbench_sizes(cfg.world_size, size)))
    return plan


class CollectiveHandle:
    """Completion handle of one asynchronous collective; owned by the issuing thread."""

    def __init__(self, session: "WorkerSession", op_id: int, kind: OpKind, nbytes: int):
        self.session = session
        self.op_id = op_id
        self.kind = kind
        self.nbytes = nbytes
        self.issue_us = monotonic_us()
        self.complete_us: Optional[float] = None
        self.future: concurrent.futures.Future = concurrent.futures.Future()

    def done(self) -> bool:
        return self.future.done()

    def __repr__(self) -> str:
        return f"CollectiveHandle(op_id={self.op_id}, kind={self.kind.value}, nbytes={self.nbytes})"


class WorkerSession:
    """
    Ring session of one real rank.

    The communicator runs on an event loop in a background thread; collectives
    are executed one at a time in issue order, like a single communication
    stream, while the caller's thread keeps computing.
    """

    def __init__(
        self,
        cfg: JobConfig,
        rank: int,
        plan: Sequence[PlanEntry],
        settings: Optional[Settings] = None,
        listen_endpoint: Optional[Endpoint] = None,
        connect_endpoint: Optional[Endpoint] = None,
    ):
        self.cfg = cfg
        self.rank = rank
        self.settings = settings or get_settings()
        self.comm = RingCommunicator(cfg, rank, plan, self.settings, listen_endpoint, connect_endpoint)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run_loop, name=f"cemu-rank{rank}", daemon=True)
        self._queue: Optional[asyncio.Queue] = None
        self._executor: Optional[asyncio.Task] = None
        self._handles: Dict[int, CollectiveHandle] = {}
        self._op_ids = itertools.count()
        self._started = False
        self._closed = False

    def _run_loop(self) -> None:
        asyncio.set_event_loop(self._loop)
        self._loop.run_forever()

    def _call(self, coro, timeout: Optional[float] = None):
        return asyncio.run_coroutine_threadsafe(coro, self._loop).result(timeout)

    def start(self) -> "WorkerSession":
        """Connect to the ring; blocks until both neighbours are reachable."""
        self._thread.start()
        try:
            self._call(self._start())
        except BaseException:
            self._stop_loop()
            raise
        self._started = True
        logger.info(f"Rank {self.rank} joined the ring of {self.cfg.world_size}")
        return self

    async def _start(self) -> None:
        self._queue = asyncio.Queue()
        await self.comm.start()
        self._executor = asyncio.get_running_loop().create_task(self._execute())

    async def _execute(self) -> None:
        while True:
            handle, array = await self._queue.get()
            if handle is None:
                return
            if not handle.future.set_running_or_notify_cancel():
                continue
            try:
                result = await self.comm.run(handle.op_id, handle.kind, array)
            except BaseException as e:
                handle.complete_us = monotonic_us()
                handle.future.set_exception(e)
                if isinstance(e, asyncio.CancelledError):
                    raise
            else:
                handle.complete_us = monotonic_us()
                handle.future.set_result(result)

    def submit(self, kind: OpKind, buffer: Union[np.ndarray, bytes, bytearray]) -> CollectiveHandle:
        if not self._started or self._closed:
            raise UsageError("session is not established")
        array = buffer if isinstance(buffer, np.ndarray) else np.frombuffer(bytearray(buffer), dtype=np.uint8)
        if kind == OpKind.ALLREDUCE and not array.flags.writeable:
            raise UsageError("all-reduce buffers must be writable")
        # validated here so the caller sees the error rather than the executor
        self.comm.plan_index(PlanEntry(kind=kind, nbytes=array.nbytes, itemsize=array.itemsize))
        handle = CollectiveHandle(self, next(self._op_ids), kind, array.nbytes)
        self._handles[handle.op_id] = handle
        self._loop.call_soon_threadsafe(self._queue.put_nowait, (handle, array))
        return handle

    def wait(self, handle: CollectiveHandle, timeout: Optional[float] = None) -> np.ndarray:
        if not isinstance(handle, CollectiveHandle) or self._handles.get(handle.op_id) is not handle:
            raise UsageError(f"unknown collective handle {handle!r}")
        try:
            return handle.future.result(timeout)
        except concurrent.futures.TimeoutError:
            raise SessionError(f"op {handle.op_id} did not complete within {timeout}s")

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if self._started:
                self._loop.call_soon_threadsafe(self._queue.put_nowait, (None, None))
                self._call(self.comm.close(), timeout=self.settings.handshake_timeout_s * 2)
        finally:
            self._stop_loop()

    def _stop_loop(self) -> None:
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=5)
        if not self._thread.is_alive() and not self._loop.is_closed():
            self._loop.close()

    def __enter__(self) -> "WorkerSession":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def allreduce_async(session: WorkerSession, buffer: Union[np.ndarray, bytearray]) -> CollectiveHandle:
    """Start an all-reduce (sum) of `buffer` in place; returns immediately."""
    return session.submit(OpKind.ALLREDUCE, buffer)


def allgather_async(session: WorkerSession, buffer: Union[np.ndarray, bytes, bytearray]) -> CollectiveHandle:
    return session.submit(OpKind.ALLGATHER, buffer)


def wait(handle: CollectiveHandle, timeout: Optional[float] = None) -> np.ndarray:
    """
    Block until a collective completes and return its result.

    Waiting again on a completed handle returns the same result immediately.

    Raises:
        UsageError: If `handle` was not issued by a live session
        SessionError, ProtocolError: If the collective failed
    """
    if not isinstance(handle, CollectiveHandle):
        raise UsageError(f"unknown collective handle {handle!r}")
    return handle.session.wait(handle, timeout)


def run_training_loop(cfg: JobConfig, model: ModelSpec, session: WorkerSession,
                      iterations: Optional[int] = None, warmup: Optional[int] = None) -> List[IterationTrace]:
    """
    Run the synthetic training loop and return post-warmup iteration traces.

    Forward compute runs layer by layer; backward compute runs in reverse and
    each bucket's all-reduce is issued as soon as its last layer finishes, so
    communication overlaps the remaining backward compute.
    """
    iterations = model.iterations if iterations is None else iterations
    warmup = model.warmup_iterations if warmup is None else warmup
    buckets = bucketize(model, effective_bucket_bytes(cfg, model))
    closing = {bucket.last_layer: bucket for bucket in buckets}
    itemsize = np.dtype(GRAD_DTYPE).itemsize
    grads = [np.ones(bucket.nbytes // itemsize, dtype=GRAD_DTYPE) for bucket in buckets]
    logger.info(f"Training {model.name}: {len(model.layers)} layers in {len(buckets)} buckets, "
                f"{warmup} warmup + {iterations} timed iterations")

    traces: List[IterationTrace] = []
    for iteration in range(warmup + iterations):
        start = monotonic_us()
        for layer in model.layers:
            spin_for_us(layer.forward_us)

        issued: List[Tuple[Bucket, Optional[CollectiveHandle], float]] = []
        for index in reversed(range(len(model.layers))):
            spin_for_us(model.layers[index].backward_us)
            bucket = closing.get(index)
            if bucket is None:
                continue
            if bucket.nbytes:
                grads[bucket.bucket_id].fill(1)
                issued.append((bucket, allreduce_async(session, grads[bucket.bucket_id]), 0.0))
            else:
                issued.append((bucket, None, monotonic_us()))

        timings: List[BucketTiming] = []
        for bucket, handle, at in issued:
            if handle is None:
                timings.append(BucketTiming(bucket_id=bucket.bucket_id, issue_us=at, complete_us=at))
                continue
            wait(handle)
            timings.append(BucketTiming(bucket_id=bucket.bucket_id, issue_us=handle.issue_us,
                                        complete_us=max(handle.complete_us, handle.issue_us)))
        spin_for_us(model.update_us)
        end = monotonic_us()

        if iteration >= warmup:
            traces.append(IterationTrace(iteration=iteration - warmup, start_us=start, end_us=end, buckets=timings))
        logger.debug(f"Iteration {iteration}: {end - start:.0f} us")
    return traces


def run_microbench_loop(session: WorkerSession, sizes: Sequence[int], reps: int,
                        warmup: int = 5) -> List[Dict[str, float]]:
    """
    Time back-to-back collectives per size and kind.

    Returns rows with op_kind, size_bytes, mean_us, stddev_us and repetitions;
    all-gather sizes are totals, each rank contributing an equal share.
    """
    n = session.cfg.world_size
    rows: List[Dict[str, float]] = []
    for size in sizes:
        for kind in (OpKind.ALLREDUCE, OpKind.ALLGATHER):
            nbytes = size if kind == OpKind.ALLREDUCE else microbench_sizes(n, size)
            buffer = np.zeros(nbytes, dtype=np.uint8)
            for _ in range(warmup):
                wait(session.submit(kind, buffer))
            samples = np.empty(reps, dtype=np.float64)
            for i in range(reps):
                t0 = precise_us()
                wait(session.submit(kind, buffer))
                samples[i] = precise_us() - t0
            stddev = float(samples.std(ddof=1)) if reps > 1 else 0.0
            rows.append({"op_kind": kind.value, "size_bytes": size, "mean_us": float(samples.mean()),
                         "stddev_us": stddev, "repetitions": reps})
            logger.info(f"{kind.value} {size} B: {samples.mean():.1f} ± {stddev:.1f} us over {reps} calls")
    return rows


def verify_counts(n: int) -> List[int]:
    """All-reduce element counts used by the verify mode; most are not multiples of n."""
    return sorted({n, n + 1, 2 * n + 1, 3 * n - 1, 4 * n + 3})


def verify_plan(cfg: JobConfig) -> List[PlanEntry]:
    itemsize = np.dtype(VERIFY_DTYPE).itemsize
    plan = [PlanEntry(kind=OpKind.ALLREDUCE, nbytes=count * itemsize, itemsize=itemsize)
            for count in verify_counts(cfg.world_size)]
    plan += [PlanEntry(kind=OpKind.ALLGATHER, nbytes=count * itemsize, itemsize=itemsize)
             for count in VERIFY_GATHER_COUNTS]
    return plan


def trial_inputs(seed: int, trial: int, n: int, kind: OpKind) -> List[np.ndarray]:
    """Inputs of every rank for one trial; all ranks derive the same arrays from the shared seed."""
    rng = np.random.default_rng([seed, trial, 0 if kind == OpKind.ALLREDUCE else 1])
    counts = verify_counts(n) if kind == OpKind.ALLREDUCE else list(VERIFY_GATHER_COUNTS)
    count = counts[int(rng.integers(len(counts)))]
    return [rng.integers(-1000, 1000, size=count, dtype=VERIFY_DTYPE) for _ in range(n)]


def expected_result(kind: OpKind, inputs: Sequence[np.ndarray]) -> np.ndarray:
    return np.sum(inputs, axis=0) if kind == OpKind.ALLREDUCE else np.concatenate(inputs)


def run_verify_loop(session: WorkerSession, trials: int, seed: int = 0) -> List[Dict[str, object]]:
    """
    Run random all-reduce and all-gather trials and compare each result with
    direct summation or concatenation of every rank's input.

    Only meaningful when every peer is a real rank.

    Raises:
        AcceptanceError: If any result differs from the expected one
    """
    if seed < 0:
        raise UsageError(f"seed must be ≥ 0, got {seed}")
    n = session.cfg.world_size
    rows: List[Dict[str, object]] = []
    wrong: List[str] = []
    for trial in range(trials):
        for kind in (OpKind.ALLREDUCE, OpKind.ALLGATHER):
            inputs = trial_inputs(seed, trial, n, kind)
            result = wait(session.submit(kind, inputs[session.rank].copy()))
            ok = bool(np.array_equal(result, expected_result(kind, inputs)))
            rows.append({"trial": trial, "op_kind": kind.value, "count": int(inputs[0].size), "ok": ok})
            if not ok:
                wrong.append(f"trial {trial} {kind.value} of {inputs[0].size} elements")
    if wrong:
        raise AcceptanceError(f"rank {session.rank}: {len(wrong)} of {len(rows)} results wrong, first: {wrong[0]}")
    logger.info(f"Rank {session.rank}: {len(rows)} collectives over {trials} trials matched")
    return rows
