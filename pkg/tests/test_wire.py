import random

import pytest

from error_handlers import (BadMagicError, BadVersionError, FrameError, PayloadTooLargeError, ProtocolError,
                            TruncatedFrameError)
from models import MsgDesc
from wire import (HEADER, HEADER_SIZE, MAGIC, Frame, FrameDecoder, MsgType, data_frame, decode_frame,
                  decode_header, dummy_payload, encode_frame, frame_msg)


def random_frame(rng: random.Random) -> Frame:
    return Frame(
        msg_type=rng.choice(list(MsgType)),
        op_id=rng.randrange(1 << 32),
        seq=rng.randrange(1 << 32),
        src_rank=rng.randrange(1 << 16),
        dst_rank=rng.randrange(1 << 16),
        chunk_index=rng.randrange(1 << 16),
        payload=rng.randbytes(rng.choice([0, 1, 7, 64, 300])),
    )


def test_header_is_24_bytes():
    assert HEADER_SIZE == 24
    encoded = encode_frame(Frame(msg_type=MsgType.BYE))
    assert encoded[:4] == MAGIC
    assert len(encoded) == 24


def test_random_frames_survive_arbitrary_splits():
    rng = random.Random(3)
    frames = [random_frame(rng) for _ in range(10_000)]
    stream = b"".join(encode_frame(f) for f in frames)

    decoder = FrameDecoder()
    out = []
    pos = 0
    while pos < len(stream):
        step = rng.choice([1, 5, 23, 24, 25, 97, 4096])
        out.extend(decoder.feed(stream[pos:pos + step]))
        pos += step
    assert out == frames
    assert decoder.pending == 0


def test_single_frame_decode():
    frame = Frame(msg_type=MsgType.DATA, op_id=7, seq=2, src_rank=3, dst_rank=0, chunk_index=1, payload=b"abcd")
    assert decode_frame(encode_frame(frame)) == frame


def test_bad_magic():
    raw = bytearray(encode_frame(Frame(msg_type=MsgType.HELLO)))
    raw[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode_frame(bytes(raw))


def test_bad_version():
    raw = bytearray(encode_frame(Frame(msg_type=MsgType.HELLO)))
    raw[4] = 9
    with pytest.raises(BadVersionError):
        decode_frame(bytes(raw))


def test_unknown_message_type():
    raw = HEADER.pack(MAGIC, 1, 42, 0, 0, 0, 0, 0, 0)
    with pytest.raises(FrameError, match="unknown message type"):
        decode_header(raw)


def test_payload_cap_on_both_sides():
    with pytest.raises(PayloadTooLargeError):
        encode_frame(Frame(msg_type=MsgType.DATA, payload=bytes(11)), max_payload=10)
    raw = HEADER.pack(MAGIC, 1, int(MsgType.DATA), 0, 0, 0, 0, 0, 1 << 30)
    with pytest.raises(PayloadTooLargeError):
        FrameDecoder(max_payload=1024).feed(raw)


def test_truncated_and_trailing_bytes():
    encoded = encode_frame(Frame(msg_type=MsgType.DATA, payload=b"xyz"))
    with pytest.raises(TruncatedFrameError):
        decode_frame(encoded[:10])
    with pytest.raises(TruncatedFrameError):
        decode_frame(encoded[:-1])
    with pytest.raises(FrameError, match="trailing"):
        decode_frame(encoded + b"\x00")


def test_out_of_range_fields_are_rejected():
    with pytest.raises(ValueError):
        Frame(msg_type=MsgType.DATA, src_rank=1 << 16)


def test_data_frame_carries_message_metadata():
    msg = MsgDesc(op_id=4, step=3, src_rank=2, dst_rank=3, chunk_index=1, size_bytes=16)
    frame = data_frame(msg, dummy_payload(16))
    assert frame.payload == bytes(16)
    assert frame_msg(frame) == msg


def test_frame_msg_rejects_self_addressed_data():
    with pytest.raises(ProtocolError):
        frame_msg(Frame(msg_type=MsgType.DATA, src_rank=1, dst_rank=1))


def test_dummy_payload_is_zero_bytes():
    assert dummy_payload(0) == b""
    assert dummy_payload(5) == b"\x00" * 5


def test_dummy_payload_rejects_negative_size():
    with pytest.raises(ValueError):
        dummy_payload(-1)
