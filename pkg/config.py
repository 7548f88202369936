"""Job configuration: the flat key=value document shared by every process of a run.

Document format (``#`` starts a comment)::

    world_size=4
    real_ranks=0
    node_class=v100
    bucket_bytes=26214400
    delay.kind=alpha_beta
    delay.alpha_us=10
    delay.beta_us_per_byte=0.01
    delay.gamma_us_per_byte=0.001
    delay.fixed_us=0
    delay.inject_us=0
    endpoint.base=127.0.0.1:29500

``endpoint.base`` assigns port+rank to every rank; ``endpoint.<rank>`` overrides
single ranks. ``node_class.<rank>`` overrides the class of one rank.
"""
import hashlib
import io
import logging
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Literal, Optional, Tuple

import validators
from dotenv.parser import parse_stream
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_core import PydanticCustomError
from pydantic_settings import BaseSettings, SettingsConfigDict

from error_handlers import ConfigParseError, ConfigValidationError, OutOfScopeError

logger = logging.getLogger(__name__)

DEFAULT_BUCKET_BYTES = 25 * 1024 * 1024
DEFAULT_NODE_CLASS = "default"


class Settings(BaseSettings):
    """Process-level runtime knobs, read from CEMU_* environment variables or .env."""
    model_config = SettingsConfigDict(env_prefix="CEMU_", env_file=".env", extra="ignore")

    trace: Optional[str] = None
    log_level: str = "INFO"
    poll_period_us: float = 10.0
    spin_window_us: float = 1000.0
    early_wake_fraction: float = 0.2
    handshake_timeout_s: float = 10.0
    max_payload_bytes: int = 64 * 1024 * 1024
    trace_retention: int = 1024
    connect_retries: int = 40
    connect_initial_delay_s: float = 0.05
    connect_max_delay_s: float = 0.5
    child_timeout_s: float = 600.0


@lru_cache
def get_settings() -> Settings:
    return Settings()


class DelayKind(str, Enum):
    NONE = "none"
    ALPHA_BETA = "alpha_beta"
    FIXED = "fixed"


class LinkParams(BaseModel):
    """Uniform link cost: per-message latency, inverse bandwidth, reduction cost."""
    model_config = ConfigDict(frozen=True)

    alpha_us: float = Field(default=0.0, ge=0)
    beta_us_per_byte: float = Field(default=0.0, ge=0)
    gamma_us_per_byte: float = Field(default=0.0, ge=0)


class Endpoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    host: str
    port: int = Field(ge=1, le=65535)

    @field_validator("host")
    @classmethod
    def validate_host(cls, v: str) -> str:
        if v == "localhost" or validators.ipv4(v) or validators.ipv6(v) or validators.domain(v):
            return v
        raise ValueError(f"Invalid host {v!r}")

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        host, sep, port = text.strip().rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"Endpoint must look like host:port, got {text!r}")
        return cls(host=host.strip("[]"), port=int(port))

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


def _config_error(field: str, detail: str, error_type: str = "job_config") -> PydanticCustomError:
    return PydanticCustomError(error_type, "{field}: {detail}", {"field": field, "detail": detail})


class JobConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    world_size: int
    real_ranks: FrozenSet[int]
    node_class: Tuple[str, ...]
    link: LinkParams = LinkParams()
    collective_algo: Literal["ring"] = "ring"
    bucket_bytes: int = DEFAULT_BUCKET_BYTES
    chunk_policy: Literal["one-chunk-per-partition"] = "one-chunk-per-partition"
    delay_kind: DelayKind = DelayKind.NONE
    delay_fixed_us: float = Field(default=0.0, ge=0)
    delay_inject_us: float = Field(default=0.0, ge=0)
    endpoints: Tuple[Endpoint, ...]

    @field_validator("world_size")
    @classmethod
    def validate_world_size(cls, v: int) -> int:
        if v < 2:
            raise ValueError("world_size ≥ 2 required")
        return v

    @field_validator("bucket_bytes")
    @classmethod
    def validate_bucket_bytes(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("bucket_bytes must be positive")
        return v

    @model_validator(mode="after")
    def check_ranks(self) -> "JobConfig":
        n = self.world_size
        if not self.real_ranks:
            raise _config_error("real_ranks", "at least one real rank is required")
        outside = sorted(r for r in self.real_ranks if r < 0 or r >= n)
        if outside:
            raise _config_error("real_ranks", f"ranks {outside} outside 0..{n - 1}")
        if len(self.real_ranks) == n:
            raise _config_error("real_ranks", "real_ranks must be a strict subset of all ranks (nothing to emulate)")
        if len(self.node_class) != n:
            raise _config_error("node_class", f"expected {n} entries, got {len(self.node_class)}")
        if len(set(self.node_class)) > 1:
            raise _config_error(
                "node_class",
                "non-uniform node classes are out of scope (multi-class emulation)",
                error_type="out_of_scope",
            )
        if len(self.endpoints) != n:
            raise _config_error("endpoints", f"expected {n} endpoints, got {len(self.endpoints)}")
        if len(set(self.endpoints)) != n:
            raise _config_error("endpoints", "endpoints must be distinct")
        return self

    @property
    def emulated_ranks(self) -> FrozenSet[int]:
        return frozenset(range(self.world_size)) - self.real_ranks


_SCALAR_KEYS = {
    "world_size", "real_ranks", "node_class", "collective_algo", "bucket_bytes", "chunk_policy",
    "delay.kind", "delay.alpha_us", "delay.beta_us_per_byte", "delay.gamma_us_per_byte",
    "delay.fixed_us", "delay.inject_us", "endpoint.base",
}


def _read_bindings(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for binding in parse_stream(io.StringIO(text)):
        if binding.error:
            line = binding.original.line
            raise ConfigParseError(
                f"could not parse line {line}: {binding.original.string.strip()!r}", field=f"line {line}"
            )
        if binding.key is None:
            continue
        if binding.key in values:
            raise ConfigParseError("key given more than once", field=binding.key)
        if binding.value is None:
            raise ConfigParseError("missing value", field=binding.key)
        values[binding.key] = binding.value.strip()
    return values


def _rank_suffix(key: str, prefix: str, world_size: int) -> int:
    suffix = key[len(prefix):]
    if not suffix.isdigit():
        raise ConfigParseError("unknown configuration key", field=key)
    rank = int(suffix)
    if rank >= world_size:
        raise ConfigValidationError(f"rank {rank} outside 0..{world_size - 1}", field=key)
    return rank


def _as_int(values: Dict[str, str], key: str) -> int:
    try:
        return int(values[key])
    except ValueError:
        raise ConfigValidationError(f"expected an integer, got {values[key]!r}", field=key)


def _as_float(values: Dict[str, str], key: str, default: float = 0.0) -> float:
    if key not in values:
        return default
    try:
        return float(values[key])
    except ValueError:
        raise ConfigValidationError(f"expected a number, got {values[key]!r}", field=key)


def _as_endpoint(values: Dict[str, str], key: str) -> Endpoint:
    try:
        return Endpoint.parse(values[key])
    except (ValueError, ValidationError) as e:
        raise ConfigValidationError(str(e), field=key)


def _from_validation_error(error: ValidationError) -> ConfigValidationError:
    first = error.errors()[0]
    ctx = first.get("ctx") or {}
    if "field" in ctx:
        field = ctx["field"]
        message = ctx.get("detail", first["msg"])
    else:
        field = ".".join(str(part) for part in first["loc"]) or "config"
        message = first["msg"].removeprefix("Value error, ")
    if first["type"] == "out_of_scope":
        return OutOfScopeError(message, field=field)
    return ConfigValidationError(message, field=field)


def parse_job_config(text: str) -> JobConfig:
    """
    Parse and validate a job configuration document.

    Args:
        text: The key=value configuration document

    Returns:
        JobConfig: Validated configuration

    Raises:
        ConfigParseError: If the document is malformed or names unknown keys
        ConfigValidationError: If a value violates an invariant
    """
    values = _read_bindings(text)
    if "world_size" not in values:
        raise ConfigValidationError("required key missing", field="world_size")
    if "real_ranks" not in values:
        raise ConfigValidationError("required key missing", field="real_ranks")

    world_size = _as_int(values, "world_size")
    rank_count = max(world_size, 0)

    node_class = [values.get("node_class", DEFAULT_NODE_CLASS)] * rank_count
    endpoints: Dict[int, Endpoint] = {}
    if "endpoint.base" in values:
        base = _as_endpoint(values, "endpoint.base")
        for rank in range(rank_count):
            port = base.port + rank
            if port > 65535:
                raise ConfigValidationError(f"port {port} for rank {rank} out of range", field="endpoint.base")
            endpoints[rank] = Endpoint(host=base.host, port=port)

    for key in values:
        if key in _SCALAR_KEYS:
            continue
        if key.startswith("node_class."):
            node_class[_rank_suffix(key, "node_class.", rank_count)] = values[key]
        elif key.startswith("endpoint."):
            endpoints[_rank_suffix(key, "endpoint.", rank_count)] = _as_endpoint(values, key)
        else:
            raise ConfigParseError("unknown configuration key", field=key)

    try:
        real_ranks = frozenset(int(part) for part in values["real_ranks"].split(",") if part.strip())
    except ValueError:
        raise ConfigValidationError(f"expected a comma-separated rank list, got {values['real_ranks']!r}",
                                    field="real_ranks")

    missing = [rank for rank in range(rank_count) if rank not in endpoints]
    if missing and world_size >= 2:
        raise ConfigValidationError(f"no endpoint for ranks {missing}", field="endpoints")

    raw = {
        "world_size": world_size,
        "real_ranks": real_ranks,
        "node_class": tuple(node_class),
        "link": {
            "alpha_us": _as_float(values, "delay.alpha_us"),
            "beta_us_per_byte": _as_float(values, "delay.beta_us_per_byte"),
            "gamma_us_per_byte": _as_float(values, "delay.gamma_us_per_byte"),
        },
        "collective_algo": values.get("collective_algo", "ring"),
        "bucket_bytes": _as_int(values, "bucket_bytes") if "bucket_bytes" in values else DEFAULT_BUCKET_BYTES,
        "chunk_policy": values.get("chunk_policy", "one-chunk-per-partition"),
        "delay_kind": values.get("delay.kind", DelayKind.NONE.value),
        "delay_fixed_us": _as_float(values, "delay.fixed_us"),
        "delay_inject_us": _as_float(values, "delay.inject_us"),
        "endpoints": tuple(endpoints[rank] for rank in sorted(endpoints)),
    }
    try:
        return JobConfig.model_validate(raw)
    except ValidationError as e:
        raise _from_validation_error(e)


def render_job_config(cfg: JobConfig) -> str:
    """Render the canonical document for a configuration; parse_job_config inverts it."""
    lines = [
        f"world_size={cfg.world_size}",
        f"real_ranks={','.join(str(r) for r in sorted(cfg.real_ranks))}",
        f"node_class={cfg.node_class[0]}",
        f"collective_algo={cfg.collective_algo}",
        f"chunk_policy={cfg.chunk_policy}",
        f"bucket_bytes={cfg.bucket_bytes}",
        f"delay.kind={cfg.delay_kind.value}",
        f"delay.alpha_us={float(cfg.link.alpha_us)!r}",
        f"delay.beta_us_per_byte={float(cfg.link.beta_us_per_byte)!r}",
        f"delay.gamma_us_per_byte={float(cfg.link.gamma_us_per_byte)!r}",
        f"delay.fixed_us={float(cfg.delay_fixed_us)!r}",
        f"delay.inject_us={float(cfg.delay_inject_us)!r}",
    ]
    lines.extend(f"endpoint.{rank}={endpoint}" for rank, endpoint in enumerate(cfg.endpoints))
    return "\n".join(lines) + "\n"


def config_digest(cfg: JobConfig) -> str:
    return hashlib.sha256(render_job_config(cfg).encode("utf-8")).hexdigest()


def load_job_config(path: str) -> JobConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read {path}: {e.strerror}", field="--config")
    cfg = parse_job_config(text)
    logger.debug(f"Loaded job config {path} (world_size={cfg.world_size})")
    return cfg
