"""Delay models: how long the emulated ranks take before each reply to the real node.

A delay model is any callable ``(boundary, params, op_kind, n, m) -> offsets``
returning one offset in microseconds per to-real vertex, in bitmap order.
Register additional models with :func:`register_delay_model`.
"""
import logging
from typing import Callable, Dict, List

from pydantic import BaseModel, ConfigDict, Field

from collective_dag import BoundaryDag, schedule_positions
from config import DelayKind, JobConfig, LinkParams
from error_handlers import DelayModelError
from models import Direction, OpKind

logger = logging.getLogger(__name__)

DelayModel = Callable[[BoundaryDag, "DelayModelParams", OpKind, int, int], List[float]]

_MODELS: Dict[str, DelayModel] = {}


class DelayModelParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str = DelayKind.NONE.value
    link: LinkParams = LinkParams()
    fixed_us: float = Field(default=0.0, ge=0)
    inject_us: float = Field(default=0.0, ge=0)

    @classmethod
    def from_config(cls, cfg: JobConfig) -> "DelayModelParams":
        return cls(kind=cfg.delay_kind.value, link=cfg.link,
                   fixed_us=cfg.delay_fixed_us, inject_us=cfg.delay_inject_us)


def _check_n(n: int) -> None:
    if n < 2:
        raise DelayModelError(f"world size must be ≥ 2, got {n}")


def ring_allreduce_delay(n: int, m: float, link: LinkParams) -> float:
    """Closed-form ring all-reduce time: 2(n-1)α + 2((n-1)/n)mβ + ((n-1)/n)mγ."""
    _check_n(n)
    if m < 0:
        raise DelayModelError(f"message size must be ≥ 0, got {m}")
    frac = (n - 1) / n
    return 2 * (n - 1) * link.alpha_us + 2 * frac * m * link.beta_us_per_byte + frac * m * link.gamma_us_per_byte


def ring_allgather_delay(n: int, m_per_rank: float, link: LinkParams) -> float:
    _check_n(n)
    if m_per_rank < 0:
        raise DelayModelError(f"message size must be ≥ 0, got {m_per_rank}")
    return (n - 1) * link.alpha_us + (n - 1) * m_per_rank * link.beta_us_per_byte


def register_delay_model(name: str) -> Callable[[DelayModel], DelayModel]:
    def decorator(func: DelayModel) -> DelayModel:
        _MODELS[name] = func
        return func
    return decorator


def _to_real_steps(boundary: BoundaryDag) -> List[int]:
    return [boundary.vertices[i].msg.step for i in boundary.indices(Direction.TO_REAL)]


@register_delay_model(DelayKind.NONE.value)
def _no_delay(boundary: BoundaryDag, params: DelayModelParams, op_kind: OpKind, n: int, m: int) -> List[float]:
    return [0.0] * len(boundary.indices(Direction.TO_REAL))


@register_delay_model(DelayKind.FIXED.value)
def _fixed_delay(boundary: BoundaryDag, params: DelayModelParams, op_kind: OpKind, n: int, m: int) -> List[float]:
    return [params.fixed_us] * len(boundary.indices(Direction.TO_REAL))


@register_delay_model(DelayKind.ALPHA_BETA.value)
def _alpha_beta_delay(boundary: BoundaryDag, params: DelayModelParams, op_kind: OpKind, n: int,
                      m: int) -> List[float]:
    if op_kind == OpKind.ALLREDUCE:
        total = ring_allreduce_delay(n, m, params.link)
    else:
        total = ring_allgather_delay(n, m, params.link)
    positions = schedule_positions(op_kind, n)
    # linear share of the call-level total by schedule position
    return [total * (step + 1) / positions for step in _to_real_steps(boundary)]


def release_offsets(boundary: BoundaryDag, params: DelayModelParams, op_kind: OpKind, n: int,
                    m: int) -> List[float]:
    """
    Per to-real vertex release offsets relative to operation registration.

    The injected per-call delay stalls the first reply only; offsets are then
    made nondecreasing along the chain.

    Raises:
        DelayModelError: If params.kind names no registered model
    """
    model = _MODELS.get(params.kind)
    if model is None:
        raise DelayModelError(f"unknown delay model {params.kind!r}; known: {sorted(_MODELS)}")
    offsets = [float(x) for x in model(boundary, params, op_kind, n, m)]
    if offsets:
        offsets[0] += params.inject_us
    for i in range(1, len(offsets)):
        offsets[i] = max(offsets[i], offsets[i - 1])
    return offsets
