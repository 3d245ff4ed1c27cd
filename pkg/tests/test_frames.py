import struct

import pytest
from cryptography.hazmat.primitives.ciphers.aead import AESCCM
from hypothesis import given
from hypothesis import strategies as st

from lightmesh.frames import (
    BROADCAST,
    MAX_PAYLOAD,
    AckBody,
    AppKind,
    AuthFailure,
    CmdBody,
    CmdOp,
    DaoBody,
    DataBody,
    DioBody,
    EventBody,
    EventCode,
    Frame,
    FrameKind,
    Malformed,
    OtaDataBody,
    OtaNackBody,
    PayloadTooLong,
    PhyParams,
    StatusBody,
    airtime,
    decode_frame,
    encode_frame,
)

KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
OTHER_KEY = bytes.fromhex("000102030405060708090a0b0c0d0e0f")

# Frozen wire vectors: a status uplink and a root DIO under KEY.
STATUS_FRAME = Frame(
    FrameKind.DATA, 0x0102, 0x0001, 0x0304, 15,
    DataBody(0x0102, 7, AppKind.STATUS, StatusBody(1, 512, 1, 0, 0).pack()).pack(),
)
STATUS_HEX = "030102000103040f21588e96d559d14b4bc998307daa2b9c8cf4de8819b9f3c4"
DIO_FRAME = Frame(FrameKind.DIO, 1, BROADCAST, 9, 0, DioBody(1, 0, 256, 0).pack())
DIO_HEX = "010001ffff000900ee406cee1bff49b83fa54b7b8e9113d5"

frames = st.builds(
    Frame,
    kind=st.sampled_from(list(FrameKind)),
    src=st.integers(0, 0xFFFF),
    dst=st.integers(0, 0xFFFF),
    seq=st.integers(0, 0xFFFF),
    ttl=st.integers(0, 15),
    payload=st.binary(max_size=MAX_PAYLOAD),
)


def test_golden_vectors():
    assert encode_frame(STATUS_FRAME, KEY).hex() == STATUS_HEX
    assert encode_frame(DIO_FRAME, KEY).hex() == DIO_HEX
    assert decode_frame(bytes.fromhex(STATUS_HEX), KEY) == STATUS_FRAME
    assert decode_frame(bytes.fromhex(DIO_HEX), KEY) == DIO_FRAME


def test_layout_matches_independent_ccm():
    # header in clear as associated data; nonce = src, seq, kind zero-padded to 13 bytes
    f = STATUS_FRAME
    header = struct.pack(">BHHHB", f.kind, f.src, f.dst, f.seq, f.ttl)
    nonce = struct.pack(">HHB", f.src, f.seq, f.kind) + bytes(8)
    expected = header + AESCCM(KEY, tag_length=8).encrypt(nonce, f.payload, header)
    assert encode_frame(f, KEY) == expected


def test_data_frame_length():
    f = Frame(FrameKind.DATA, 5, 1, 1, 15, bytes(20))
    assert len(encode_frame(f, KEY)) == 36
    assert f.encoded_len == 36


def test_wrong_key_rejected():
    with pytest.raises(AuthFailure):
        decode_frame(encode_frame(STATUS_FRAME, KEY), OTHER_KEY)


def test_last_byte_flip_rejected():
    data = bytearray(encode_frame(STATUS_FRAME, KEY))
    data[-1] ^= 0x01
    with pytest.raises(AuthFailure):
        decode_frame(bytes(data), KEY)


def test_short_input_malformed():
    with pytest.raises(Malformed):
        decode_frame(b"\x03\x00\x01", KEY)


def test_oversize_input_malformed():
    with pytest.raises(Malformed):
        decode_frame(bytes(256), KEY)


def test_payload_too_long():
    with pytest.raises(PayloadTooLong):
        Frame(FrameKind.DATA, 1, 2, 3, 0, bytes(MAX_PAYLOAD + 1))


def test_field_ranges():
    with pytest.raises(ValueError):
        Frame(FrameKind.DATA, 0x10000, 1, 1)
    with pytest.raises(ValueError):
        Frame(FrameKind.DATA, 1, 1, 1, ttl=16)


def test_retransmission_is_byte_identical():
    assert encode_frame(STATUS_FRAME, KEY) == encode_frame(STATUS_FRAME, KEY)


@given(frames)
def test_round_trip(f):
    assert decode_frame(encode_frame(f, KEY), KEY) == f


@given(frames, st.data())
def test_any_single_bit_flip_rejected(f, data):
    wire = bytearray(encode_frame(f, KEY))
    bit = data.draw(st.integers(0, len(wire) * 8 - 1))
    wire[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(AuthFailure):
        decode_frame(bytes(wire), KEY)


@given(frames, st.integers(1, 7))
def test_truncation_rejected(f, cut):
    wire = encode_frame(f, KEY)
    with pytest.raises((AuthFailure, Malformed)):
        decode_frame(wire[:-cut], KEY)


# --- bodies ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "body",
    [
        DioBody(1, 3, 512, 1, 1),
        DaoBody(3, (101, 102, 103)),
        DaoBody(0, (), no_path=True),
        DataBody(101, 9, AppKind.EVENT, b"\x01\x02"),
        StatusBody(2, 768, 101, 40, 3),
        AckBody(0xBEEF),
        OtaDataBody(7, 2, 1999, bytes(range(64))),
        OtaNackBody(7, ((5, 3), (100, 1))),
        CmdBody(0xFFFF, 4, CmdOp.OTA_ACTIVATE, 7),
        EventBody(EventCode.OTA_PROGRESS, 7, 50),
    ],
)
def test_body_round_trip(body):
    assert type(body).unpack(body.pack()) == body


@pytest.mark.parametrize(
    "cls, data",
    [
        (DioBody, b"\x00" * 7),
        (DaoBody, b"\x00"),
        (DaoBody, b"\x00\x00\x01"),
        (DataBody, b"\x00\x01"),
        (DataBody, b"\x00\x01\x00\x01\x09"),  # unknown app kind
        (StatusBody, b"\x00" * 10),
        (AckBody, b"\x00"),
        (OtaDataBody, b"\x00" * 9),
        (OtaNackBody, b"\x00" * 6),
        (CmdBody, b"\x00" * 9),
        (CmdBody, b"\x00\x01\x00\x01\x09\x00\x00\x00\x00"),  # unknown op
        (EventBody, b"\x63" + bytes(8)),  # unknown code
    ],
)
def test_body_malformed(cls, data):
    with pytest.raises(Malformed):
        cls.unpack(data)


def test_nack_range_limit():
    with pytest.raises(PayloadTooLong):
        OtaNackBody(1, tuple((i, 1) for i in range(9))).pack()


# --- airtime -------------------------------------------------------------------------
# Reference values from the SX1272 datasheet formula, evaluated by hand.


def test_airtime_sf7_bw125():
    assert airtime(PhyParams(), 20) == pytest.approx(56.576, abs=1e-9)


def test_airtime_bw250_is_half():
    assert airtime(PhyParams(bandwidth=250_000), 20) == pytest.approx(56.576 / 2, abs=1e-9)


def test_airtime_sf12_clamp():
    phy = PhyParams(spreading_factor=12, explicit_header=False, crc_on=False)
    assert airtime(phy, 1) == pytest.approx(663.552, abs=1e-9)


@given(st.integers(0, 254))
def test_airtime_monotone_in_length(n):
    phy = PhyParams()
    assert airtime(phy, n + 1) >= airtime(phy, n)


def test_phy_validation():
    with pytest.raises(ValueError):
        PhyParams(spreading_factor=6)
    with pytest.raises(ValueError):
        PhyParams(bandwidth=200_000)
    with pytest.raises(ValueError):
        airtime(PhyParams(), 256)
