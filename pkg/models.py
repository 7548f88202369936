from enum import Enum
from typing import List, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, model_validator


class OpKind(str, Enum):
    ALLREDUCE = "allreduce"
    ALLGATHER = "allgather"


class TaskKind(str, Enum):
    SEND = "send"
    RECV = "recv"


class Direction(str, Enum):
    """Which way a boundary message crosses between the real node and the emulator."""
    TO_REAL = "to_real"
    FROM_REAL = "from_real"


class MsgDesc(BaseModel):
    """One point-to-point message of a ring collective."""
    model_config = ConfigDict(frozen=True)

    op_id: int = Field(ge=0)
    step: int = Field(ge=0)  # schedule position within the call
    src_rank: int = Field(ge=0)
    dst_rank: int = Field(ge=0)
    chunk_index: int = Field(ge=0)
    size_bytes: int = Field(ge=0)

    @model_validator(mode="after")
    def check_distinct_ranks(self) -> "MsgDesc":
        if self.src_rank == self.dst_rank:
            raise ValueError("src_rank and dst_rank must differ")
        return self

    def key(self) -> Tuple[int, int, int, int, int]:
        """Identity of the message independent of the operation it belongs to."""
        return (self.step, self.src_rank, self.dst_rank, self.chunk_index, self.size_bytes)


class PlanEntry(BaseModel):
    """A collective shape declared at handshake; OPEN_OP refers to it by index."""
    model_config = ConfigDict(frozen=True)

    kind: OpKind
    nbytes: int = Field(ge=0)
    itemsize: int = Field(default=1, ge=1)


class NodeRecord(BaseModel):
    """Local-graph record of one rank, as exchanged in TOPO frames."""
    model_config = ConfigDict(frozen=True)

    rank: int = Field(ge=0)
    node_class: str
    is_real: bool = True


class BucketTiming(BaseModel):
    bucket_id: int = Field(ge=0)
    issue_us: float
    complete_us: float

    @model_validator(mode="after")
    def check_order(self) -> "BucketTiming":
        if self.complete_us < self.issue_us:
            raise ValueError("bucket completes before it is issued")
        return self


class IterationTrace(BaseModel):
    """Timing of one training iteration as observed on the real node."""
    iteration: int = Field(ge=0)
    start_us: float
    end_us: float
    buckets: List[BucketTiming] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_order(self) -> "IterationTrace":
        if self.end_us < self.start_us:
            raise ValueError("iteration ends before it starts")
        return self

    @property
    def iteration_time_us(self) -> float:
        return self.end_us - self.start_us


class MicrobenchResult(BaseModel):
    """Average run time per collective call for one size and mode."""
    op_kind: OpKind
    size_bytes: int = Field(ge=0)
    mean_us: float
    stddev_us: float
    mode: str = Field(pattern="^(baseline|emulated)$")
    repetitions: int = Field(ge=100)


class SweepPoint(BaseModel):
    inject_us: float = Field(ge=0)
    mean_us: float
    stddev_us: float


class SweepResult(BaseModel):
    points: List[SweepPoint]
    knee_us: float
    slope: Optional[float] = None  # absent when fewer than two tail points


class FidelityReport(BaseModel):
    """Baseline vs. emulated comparison of mean iteration times."""
    model: str
    iterations: int
    baseline_mean_us: float
    baseline_stddev_us: float
    emulated_mean_us: float
    emulated_stddev_us: float
    relative_error: float
    baseline_cpu_share: Optional[float] = None
    emulated_cpu_share: Optional[float] = None


class OpTrace(BaseModel):
    """Summary of an operation retained after it leaves the emulator registry."""
    op_id: int
    plan_index: Optional[int] = None
    created_us: float
    finished_us: float
    sent: int
    received: int
    failed: bool = False
    error: Optional[str] = None
    release_late_us: float = 0.0


class OpSummary(BaseModel):
    """Snapshot of a live operation for the status API."""
    op_id: int
    plan_index: Optional[int] = None
    created_us: float
    sent: int
    received: int
    to_real_total: int
    from_real_total: int
    failed: bool = False
