"""Binary framing of the emulation protocol.

Header, all integers little-endian::

    magic[4]="CEMU" | version[1]=1 | msg_type[1] | op_id[4] | seq[4]
    | src_rank[2] | dst_rank[2] | chunk_index[2] | payload_len[4]

followed by payload_len payload bytes.
"""
from enum import IntEnum
from functools import lru_cache
from struct import Struct
from typing import List, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from error_handlers import (BadMagicError, BadVersionError, FrameError, PayloadTooLargeError, ProtocolError,
                            TruncatedFrameError)
from models import MsgDesc

MAGIC = b"CEMU"
VERSION = 1
DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024

MAX_U32 = (1 << 32) - 1
MAX_U16 = (1 << 16) - 1

HEADER = Struct(
    '<'   # little-endian, no padding
    '4s'  # magic
    'B'   # version
    'B'   # msg_type
    'I'   # op_id
    'I'   # seq
    'H'   # src_rank
    'H'   # dst_rank
    'H'   # chunk_index
    'I'   # payload_len
)
HEADER_SIZE = HEADER.size


class MsgType(IntEnum):
    HELLO = 1
    TOPO = 2
    OPEN_OP = 3
    DATA = 4
    ERROR = 5
    BYE = 6


class Frame(BaseModel):
    model_config = ConfigDict(frozen=True)

    msg_type: MsgType
    op_id: int = Field(default=0, ge=0, le=MAX_U32)
    seq: int = Field(default=0, ge=0, le=MAX_U32)
    src_rank: int = Field(default=0, ge=0, le=MAX_U16)
    dst_rank: int = Field(default=0, ge=0, le=MAX_U16)
    chunk_index: int = Field(default=0, ge=0, le=MAX_U16)
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_header(frame: Frame, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if frame.payload_len > max_payload:
        raise PayloadTooLargeError(f"payload of {frame.payload_len} bytes exceeds cap {max_payload}")
    return HEADER.pack(MAGIC, VERSION, int(frame.msg_type), frame.op_id, frame.seq,
                       frame.src_rank, frame.dst_rank, frame.chunk_index, frame.payload_len)


def encode_frame(frame: Frame, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    return encode_header(frame, max_payload) + frame.payload


def decode_header(buf: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Tuple[Frame, int]:
    """
    Decode and check a header; the returned frame has an empty payload.

    Raises:
        TruncatedFrameError: If fewer than HEADER_SIZE bytes are given
        BadMagicError, BadVersionError: If the frame is not ours
        PayloadTooLargeError: If the declared payload exceeds the cap
    """
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrameError(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, msg_type, op_id, seq, src, dst, chunk, payload_len = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if payload_len > max_payload:
        raise PayloadTooLargeError(f"payload of {payload_len} bytes exceeds cap {max_payload}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise FrameError(f"unknown message type {msg_type}")
    return Frame.model_construct(msg_type=kind, op_id=op_id, seq=seq, src_rank=src, dst_rank=dst,
                                 chunk_index=chunk, payload=b""), payload_len


def decode_frame(buf: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Frame:
    """Decode a buffer holding exactly one frame."""
    header, payload_len = decode_header(buf, max_payload)
    end = HEADER_SIZE + payload_len
    if len(buf) < end:
        raise TruncatedFrameError(f"frame needs {end} bytes, got {len(buf)}")
    if len(buf) > end:
        raise FrameError(f"{len(buf) - end} trailing bytes after frame")
    return header.model_copy(update={"payload": bytes(buf[HEADER_SIZE:end])})


class FrameDecoder:
    """Incremental decoder: feed arbitrary byte slices, get whole frames back."""

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.max_payload = max_payload
        self._buffer = bytearray()

    def feed(self, data: bytes) -> List[Frame]:
        self._buffer.extend(data)
        frames = []
        while len(self._buffer) >= HEADER_SIZE:
            header, payload_len = decode_header(self._buffer, self.max_payload)
            end = HEADER_SIZE + payload_len
            if len(self._buffer) < end:
                break
            frames.append(header.model_copy(update={"payload": bytes(self._buffer[HEADER_SIZE:end])}))
            del self._buffer[:end]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buffer)


@lru_cache(maxsize=64)
def dummy_payload(size: int) -> bytes:
    """Zero bytes: the additive identity, so reductions at the real node see only its own data."""
    if size < 0:
        raise ValueError(f"payload size must be ≥ 0, got {size}")
    return bytes(size)


def data_frame(msg: MsgDesc, payload: bytes) -> Frame:
    return Frame(msg_type=MsgType.DATA, op_id=msg.op_id, seq=msg.step, src_rank=msg.src_rank,
                 dst_rank=msg.dst_rank, chunk_index=msg.chunk_index, payload=payload)


def frame_msg(frame: Frame) -> MsgDesc:
    """Metadata of a DATA frame; the payload itself is never inspected."""
    try:
        return MsgDesc(op_id=frame.op_id, step=frame.seq, src_rank=frame.src_rank, dst_rank=frame.dst_rank,
                       chunk_index=frame.chunk_index, size_bytes=frame.payload_len)
    except ValidationError:
        raise ProtocolError(f"malformed DATA frame from rank {frame.src_rank} to rank {frame.dst_rank}")
