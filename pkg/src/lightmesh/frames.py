"""Over-the-air frame format, AES-CCM payload protection and LoRa airtime.

Wire layout (big endian)::

    kind(1) src(2) dst(2) seq(2) ttl(1) | ciphertext(len(payload)) | tag(8)

The 8-byte header travels in clear and is authenticated as associated data.
The CCM nonce is ``src(2) seq(2) kind(1)`` zero-padded to 13 bytes, so a
retransmission of the same frame reproduces the same bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESCCM

from . import kernels

BROADCAST = 0xFFFF
HEADER_LEN = 8
TAG_LEN = 8
NONCE_LEN = 13
MAX_PAYLOAD = 200
MAX_FRAME = 255
MAX_TTL = 15

_HEADER = struct.Struct(">BHHHB")


class FrameKind(IntEnum):
    DIO = 1
    DAO = 2
    DATA = 3
    ACK = 4
    OTA_DATA = 5
    OTA_NACK = 6
    CMD = 7


class FrameError(Exception):
    """Base class for codec failures."""


class PayloadTooLong(FrameError, ValueError):
    pass


class Malformed(FrameError):
    pass


class AuthFailure(FrameError):
    pass


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    src: int
    dst: int
    seq: int
    ttl: int = 0
    payload: bytes = b""

    def __post_init__(self):
        if not isinstance(self.kind, FrameKind):
            object.__setattr__(self, "kind", FrameKind(self.kind))
        for name in ("src", "dst", "seq"):
            v = getattr(self, name)
            if not 0 <= v <= 0xFFFF:
                raise ValueError(f"{name} out of 16-bit range: {v}")
        if not 0 <= self.ttl <= MAX_TTL:
            raise ValueError(f"ttl out of range: {self.ttl}")
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLong(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")

    @property
    def is_broadcast(self) -> bool:
        return self.dst == BROADCAST

    @property
    def encoded_len(self) -> int:
        return HEADER_LEN + len(self.payload) + TAG_LEN


@lru_cache(maxsize=16)
def _cipher(key: bytes) -> AESCCM:
    if len(key) != 16:
        raise ValueError("AES-128 key must be 16 bytes")
    return AESCCM(key, tag_length=TAG_LEN)


def _nonce(src: int, seq: int, kind: int) -> bytes:
    return struct.pack(">HHB", src, seq, kind).ljust(NONCE_LEN, b"\0")


def encode_frame(frame: Frame, key: bytes) -> bytes:
    if frame.encoded_len > MAX_FRAME or len(frame.payload) > MAX_PAYLOAD:
        raise PayloadTooLong(f"frame would be {frame.encoded_len} bytes")
    header = _HEADER.pack(frame.kind, frame.src, frame.dst, frame.seq, frame.ttl)
    sealed = _cipher(key).encrypt(_nonce(frame.src, frame.seq, frame.kind), frame.payload, header)
    return header + sealed


def decode_frame(data: bytes, key: bytes) -> Frame:
    """Authenticate and decrypt ``data``.

    Raises Malformed when the input is too short to hold a header and tag, and
    AuthFailure on any tampering or key mismatch. The kind byte is only
    interpreted after the tag verifies.
    """
    if len(data) < HEADER_LEN + TAG_LEN:
        raise Malformed(f"{len(data)} bytes is shorter than header plus tag")
    if len(data) > MAX_FRAME:
        raise Malformed(f"{len(data)} bytes exceeds the LoRa maximum")
    header = bytes(data[:HEADER_LEN])
    kind, src, dst, seq, ttl = _HEADER.unpack(header)
    try:
        payload = _cipher(key).decrypt(_nonce(src, seq, kind), bytes(data[HEADER_LEN:]), header)
    except InvalidTag:
        raise AuthFailure("authentication tag mismatch") from None
    try:
        return Frame(FrameKind(kind), src, dst, seq, ttl, payload)
    except ValueError as exc:
        raise Malformed(str(exc)) from None


# --- PHY -------------------------------------------------------------------

LEGAL_BANDWIDTHS = (125_000, 250_000, 500_000)


@dataclass(frozen=True)
class PhyParams:
    spreading_factor: int = 7
    bandwidth: int = 125_000
    coding_rate: int = 5  # denominator of 4/x
    preamble_symbols: int = 8
    explicit_header: bool = True
    crc_on: bool = True
    low_datarate_optimize: bool = False
    tx_power: float = 14.0

    def __post_init__(self):
        if not 7 <= self.spreading_factor <= 12:
            raise ValueError(f"spreading_factor must be 7..12, got {self.spreading_factor}")
        if self.bandwidth not in LEGAL_BANDWIDTHS:
            raise ValueError(f"bandwidth must be one of {LEGAL_BANDWIDTHS}, got {self.bandwidth}")
        if not 5 <= self.coding_rate <= 8:
            raise ValueError(f"coding_rate denominator must be 5..8, got {self.coding_rate}")
        if self.preamble_symbols < 6:
            raise ValueError("preamble_symbols must be >= 6")


def airtime(phy: PhyParams, payload_len: int) -> float:
    """Time on air in milliseconds for a PHY payload of ``payload_len`` bytes."""
    if not 0 <= payload_len <= MAX_FRAME:
        raise ValueError(f"payload_len must be 0..{MAX_FRAME}")
    return kernels.airtime_ms(
        phy.spreading_factor,
        phy.bandwidth,
        phy.coding_rate,
        phy.preamble_symbols,
        phy.explicit_header,
        phy.crc_on,
        phy.low_datarate_optimize,
        payload_len,
    )


# --- kind-specific bodies --------------------------------------------------


@dataclass(frozen=True)
class DioBody:
    root_id: int
    version: int
    rank: int
    depth: int
    parent: int = BROADCAST  # BROADCAST when the sender has no parent

    _fmt = struct.Struct(">HBHBH")

    def pack(self) -> bytes:
        return self._fmt.pack(self.root_id, self.version, self.rank, self.depth, self.parent)

    @classmethod
    def unpack(cls, data: bytes) -> "DioBody":
        if len(data) != cls._fmt.size:
            raise Malformed("bad DIO body length")
        return cls(*cls._fmt.unpack(data))


DAO_NO_PATH = 0x01
MAX_DAO_TARGETS = (MAX_PAYLOAD - 2) // 2


@dataclass(frozen=True)
class DaoBody:
    version: int
    targets: tuple[int, ...]
    no_path: bool = False

    def pack(self) -> bytes:
        if len(self.targets) > MAX_DAO_TARGETS:
            raise PayloadTooLong("too many DAO targets")
        flags = DAO_NO_PATH if self.no_path else 0
        return struct.pack(f">BB{len(self.targets)}H", self.version, flags, *self.targets)

    @classmethod
    def unpack(cls, data: bytes) -> "DaoBody":
        if len(data) < 2 or len(data) % 2:
            raise Malformed("bad DAO body length")
        version, flags = data[0], data[1]
        targets = struct.unpack(f">{(len(data) - 2) // 2}H", data[2:])
        return cls(version, tuple(targets), bool(flags & DAO_NO_PATH))


class AppKind(IntEnum):
    STATUS = 1
    PONG = 2
    EVENT = 3
    REPAIR = 4
    ATTACHED = 5


@dataclass(frozen=True)
class DataBody:
    origin: int
    origin_seq: int
    app: AppKind
    body: bytes = b""

    _fmt = struct.Struct(">HHB")

    def pack(self) -> bytes:
        return self._fmt.pack(self.origin, self.origin_seq, self.app) + self.body

    @classmethod
    def unpack(cls, data: bytes) -> "DataBody":
        if len(data) < cls._fmt.size:
            raise Malformed("bad DATA body length")
        origin, oseq, app = cls._fmt.unpack_from(data)
        try:
            app = AppKind(app)
        except ValueError:
            raise Malformed(f"unknown application kind {app}") from None
        return cls(origin, oseq, app, bytes(data[cls._fmt.size:]))


@dataclass(frozen=True)
class StatusBody:
    firmware_version: int
    rank: int
    parent: int
    ota_percent: int = 0
    evictions: int = 0

    _fmt = struct.Struct(">IHHBH")

    def pack(self) -> bytes:
        return self._fmt.pack(
            self.firmware_version, self.rank, self.parent, self.ota_percent, min(self.evictions, 0xFFFF)
        )

    @classmethod
    def unpack(cls, data: bytes) -> "StatusBody":
        if len(data) != cls._fmt.size:
            raise Malformed("bad status body length")
        return cls(*cls._fmt.unpack(data))


@dataclass(frozen=True)
class AckBody:
    acked_seq: int

    def pack(self) -> bytes:
        return struct.pack(">H", self.acked_seq)

    @classmethod
    def unpack(cls, data: bytes) -> "AckBody":
        if len(data) != 2:
            raise Malformed("bad ACK body length")
        return cls(struct.unpack(">H", data)[0])


MANIFEST_INDEX = 0xFFFE
END_OF_PROPAGATION = 0xFFFF


@dataclass(frozen=True)
class OtaDataBody:
    image_id: int
    version: int
    chunk_index: int
    data: bytes = b""

    _fmt = struct.Struct(">IIH")

    def pack(self) -> bytes:
        return self._fmt.pack(self.image_id, self.version, self.chunk_index) + self.data

    @classmethod
    def unpack(cls, data: bytes) -> "OtaDataBody":
        if len(data) < cls._fmt.size:
            raise Malformed("bad OTA_DATA body length")
        image_id, version, index = cls._fmt.unpack_from(data)
        return cls(image_id, version, index, bytes(data[cls._fmt.size:]))


MAX_NACK_RANGES = 8


@dataclass(frozen=True)
class OtaNackBody:
    image_id: int
    ranges: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def pack(self) -> bytes:
        if len(self.ranges) > MAX_NACK_RANGES:
            raise PayloadTooLong("too many NACK ranges")
        flat = [v for r in self.ranges for v in r]
        return struct.pack(f">I{len(flat)}H", self.image_id, *flat)

    @classmethod
    def unpack(cls, data: bytes) -> "OtaNackBody":
        if len(data) < 4 or (len(data) - 4) % 4:
            raise Malformed("bad OTA_NACK body length")
        image_id = struct.unpack_from(">I", data)[0]
        flat = struct.unpack_from(f">{(len(data) - 4) // 2}H", data, 4)
        return cls(image_id, tuple(zip(flat[0::2], flat[1::2])))


class CmdOp(IntEnum):
    PING = 1
    OTA_ACTIVATE = 2


@dataclass(frozen=True)
class CmdBody:
    target: int
    cmd_seq: int
    op: CmdOp
    arg: int = 0

    _fmt = struct.Struct(">HHBI")

    def pack(self) -> bytes:
        return self._fmt.pack(self.target, self.cmd_seq, self.op, self.arg)

    @classmethod
    def unpack(cls, data: bytes) -> "CmdBody":
        if len(data) != cls._fmt.size:
            raise Malformed("bad CMD body length")
        target, cseq, op, arg = cls._fmt.unpack(data)
        try:
            op = CmdOp(op)
        except ValueError:
            raise Malformed(f"unknown command op {op}") from None
        return cls(target, cseq, op, arg)


class EventCode(IntEnum):
    OTA_PROGRESS = 1
    OTA_STAGED = 2
    DIGEST_MISMATCH = 3
    NOT_STAGED = 4
    EVICTION = 5
    ROUTE_LOSS = 6


@dataclass(frozen=True)
class EventBody:
    code: EventCode
    a: int = 0
    b: int = 0

    _fmt = struct.Struct(">BII")

    def pack(self) -> bytes:
        return self._fmt.pack(self.code, self.a, self.b)

    @classmethod
    def unpack(cls, data: bytes) -> "EventBody":
        if len(data) != cls._fmt.size:
            raise Malformed("bad event body length")
        code, a, b = cls._fmt.unpack(data)
        try:
            code = EventCode(code)
        except ValueError:
            raise Malformed(f"unknown event code {code}") from None
        return cls(code, a, b)
