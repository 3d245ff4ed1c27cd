"""Firmware dissemination: manifest, chunk bitmap, controlled flood and NACK recovery.

The pure helpers (``chunk_image``, ``reassemble``, ``missing_ranges`` and the
:class:`OtaSession` bookkeeping) know nothing about radios. :class:`OtaAgent`
is the per-node protocol engine and :class:`OtaSource` the gateway side; both
talk to the rest of the node through a small host interface:

``now`` (property), ``schedule(t, fn, *args)``, ``cancel(ev)``, ``rng``,
``parent`` (current DODAG parent or None), ``send_ota(kind, payload, dst,
on_done, still_wanted)``, ``ota_wait(frame_len)`` (seconds until the duty
budget admits an OTA frame while keeping the telemetry reserve),
``ota_event(name, **fields)`` for northbound reporting, and
``ota_reboot(delay, version)``.
"""
from __future__ import annotations

import math
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .frames import (
    BROADCAST,
    END_OF_PROPAGATION,
    HEADER_LEN,
    MANIFEST_INDEX,
    MAX_NACK_RANGES,
    TAG_LEN,
    FrameKind,
    OtaDataBody,
    OtaNackBody,
)

MIN_CHUNK = 16
MAX_CHUNK = 200 - 10  # OTA_DATA body header is 10 bytes


class OtaError(Exception):
    pass


class EmptyImage(OtaError, ValueError):
    pass


class DigestMismatch(OtaError):
    pass


class NotStaged(OtaError):
    pass


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class ImageManifest:
    image_id: int
    version: int
    total_bytes: int
    chunk_size: int = 64
    digest: int = 0

    _wire = struct.Struct(">IHI")

    @property
    def chunk_count(self) -> int:
        return math.ceil(self.total_bytes / self.chunk_size)

    def pack(self) -> bytes:
        """Manifest fields carried in an OTA_DATA frame at MANIFEST_INDEX."""
        return self._wire.pack(self.total_bytes, self.chunk_size, self.digest)

    @classmethod
    def unpack(cls, image_id: int, version: int, data: bytes) -> "ImageManifest":
        if len(data) != cls._wire.size:
            raise ValueError("bad manifest length")
        total, size, digest = cls._wire.unpack(data)
        if total <= 0 or not MIN_CHUNK <= size <= MAX_CHUNK:
            raise ValueError("manifest fields out of range")
        return cls(image_id, version, total, size, digest)


def chunk_image(image: bytes, chunk_size: int = 64, image_id: int = 1, version: int = 1):
    """Split ``image`` into zero-padded chunks; returns (manifest, chunks)."""
    if not image:
        raise EmptyImage("image is empty")
    if not MIN_CHUNK <= chunk_size <= MAX_CHUNK:
        raise ValueError(f"chunk_size must be {MIN_CHUNK}..{MAX_CHUNK}")
    manifest = ImageManifest(image_id, version, len(image), chunk_size, crc32(image))
    chunks = [
        image[i:i + chunk_size].ljust(chunk_size, b"\0") for i in range(0, len(image), chunk_size)
    ]
    return manifest, chunks


def reassemble(manifest: ImageManifest, chunks) -> bytes:
    image = b"".join(chunks)[: manifest.total_bytes]
    if crc32(image) != manifest.digest:
        raise DigestMismatch(f"image {manifest.image_id}: CRC mismatch")
    return image


def ranges_of(bitmap, value: int = 0) -> list[tuple[int, int]]:
    """Run-length encode the positions of ``bitmap`` equal to ``value``."""
    out = []
    start = None
    for i, b in enumerate(bitmap):
        if bool(b) == bool(value):
            if start is None:
                start = i
        elif start is not None:
            out.append((start, i - start))
            start = None
    if start is not None:
        out.append((start, len(bitmap) - start))
    return out


class Phase(Enum):
    PROPAGATION = "propagation"
    RECOVERY = "recovery"
    STAGED = "staged"
    ACTIVATED = "activated"


@dataclass
class OtaSession:
    image_id: int
    version: int
    manifest: ImageManifest | None = None
    phase: Phase = Phase.PROPAGATION
    chunks: dict[int, bytes] = field(default_factory=dict)
    bitmap: bytearray | None = None
    received: int = 0
    nack_round: int = 0
    image: bytes | None = None
    restarts: int = 0

    @property
    def complete(self) -> bool:
        return self.manifest is not None and self.received == self.manifest.chunk_count

    def set_manifest(self, manifest: ImageManifest) -> bool:
        if self.manifest is not None:
            return False
        self.manifest = manifest
        self.bitmap = bytearray(manifest.chunk_count)
        for idx in list(self.chunks):
            if idx < manifest.chunk_count:
                self.bitmap[idx] = 1
            else:
                del self.chunks[idx]
        self.received = len(self.chunks)
        return True

    def has(self, idx: int) -> bool:
        return idx in self.chunks

    def add_chunk(self, idx: int, data: bytes) -> bool:
        """Store a chunk; True if it was new. Bits are only ever set here."""
        if idx in self.chunks:
            return False
        if self.manifest is not None:
            if idx >= self.manifest.chunk_count or len(data) != self.manifest.chunk_size:
                return False
            self.bitmap[idx] = 1
        self.chunks[idx] = data
        self.received = len(self.chunks)
        return True

    def percent(self) -> int:
        if self.manifest is None:
            return 0
        return self.received * 100 // self.manifest.chunk_count

    def finalize(self) -> bytes:
        """Reassemble and verify; moves to STAGED or raises DigestMismatch after clearing."""
        ordered = [self.chunks[i] for i in range(self.manifest.chunk_count)]
        try:
            image = reassemble(self.manifest, ordered)
        except DigestMismatch:
            self.restart()
            raise
        self.image = image
        self.phase = Phase.STAGED
        return image

    def restart(self) -> None:
        self.chunks.clear()
        self.bitmap = bytearray(self.manifest.chunk_count) if self.manifest else None
        self.received = 0
        self.image = None
        self.restarts += 1
        self.phase = Phase.RECOVERY


def missing_ranges(session: OtaSession) -> list[tuple[int, int]]:
    if session.bitmap is None:
        return []
    return ranges_of(session.bitmap, 0)


@dataclass
class OtaConfig:
    chunk_size: int = 64
    suppress_after: int = 2
    nack_base_s: float = 30.0
    nack_cap_s: float = 960.0
    manifest_every: int = 256
    silence_intervals: int = 64  # paced frame slots without OTA traffic before a manifest-less node recovers
    reboot_window_s: float = 60.0
    reboot_downtime_s: float = 10.0
    progress_step: int = 10
    rebroadcast_delay_s: float = 4.0


# Flood bookkeeping key for the end-of-propagation marker of stripe k (never a chunk index).
_EOP_KEY = 0x10000


def eop_payload(stripe: tuple[int, int]) -> bytes:
    """End-of-propagation data: which stripe ended, out of how many."""
    return bytes(stripe)


def parse_eop(data: bytes) -> tuple[int, int]:
    if len(data) != 2 or not data[0] < data[1]:
        return (0, 1)
    return (data[0], data[1])


def _ota_frame_len(data_len: int) -> int:
    return HEADER_LEN + OtaDataBody._fmt.size + data_len + TAG_LEN


class ServeQueue:
    """Unicast repair requests, served round-robin over the requesting children.

    One child re-requesting a whole image must not hold back another child's
    single missing chunk, so each child has its own FIFO and the head child
    rotates to the back after every frame.
    """

    def __init__(self):
        self._by_child: dict[int, deque[int]] = {}

    def __bool__(self) -> bool:
        return bool(self._by_child)

    def __len__(self) -> int:
        return sum(len(q) for q in self._by_child.values())

    def __contains__(self, key: tuple[int, int]) -> bool:
        child, idx = key
        return idx in self._by_child.get(child, ())

    def add(self, child: int, idx: int) -> None:
        q = self._by_child.setdefault(child, deque())
        if idx not in q:
            q.append(idx)

    def peek(self) -> tuple[int, int]:
        child, q = next(iter(self._by_child.items()))
        return child, q[0]

    def pop(self) -> None:
        """Drop the head request and move its child to the back of the rotation."""
        child, q = next(iter(self._by_child.items()))
        q.popleft()
        del self._by_child[child]
        if q:
            self._by_child[child] = q

    def clear(self) -> None:
        self._by_child.clear()


class _Pump:
    """Shared transmit loop: one OTA frame outstanding, paced by the duty budget.

    Repairs and the flood alternate when both are pending, so a large
    re-request slows the flood down at most by half instead of stalling it.
    """

    def __init__(self, host):
        self.host = host
        self.inflight = False
        self._ev = None
        self.serve = ServeQueue()
        self.served_last = False

    def reset(self) -> None:
        if self._ev is not None:
            self.host.cancel(self._ev)
            self._ev = None
        self.inflight = False
        self.serve.clear()

    def add_serve(self, child: int, idx: int) -> None:
        self.serve.add(child, idx)

    def next_item(self):  # -> (dst, index, data_len) or None
        raise NotImplementedError

    def frame(self, dst: int, idx: int):  # -> (payload, still_wanted)
        raise NotImplementedError

    def kick(self) -> None:
        if self.inflight or self._ev is not None:
            return
        item = self.next_item()
        if item is None:
            return
        dst, idx, data_len = item
        wait = self.host.ota_wait(_ota_frame_len(data_len))
        if wait > 0:
            self._ev = self.host.schedule(self.host.now + wait, self._wake)
            return
        self.pop(item)
        payload, still_wanted = self.frame(dst, idx)
        self.inflight = True
        self.host.send_ota(FrameKind.OTA_DATA, payload, dst, self._done, still_wanted)

    def pop(self, item) -> None:
        raise NotImplementedError

    def _wake(self) -> None:
        self._ev = None
        self.kick()

    def _done(self, ok: bool) -> None:
        self.inflight = False
        self.kick()


class OtaAgent(_Pump):
    """Router-side OTA state machine."""

    def __init__(self, host, cfg: OtaConfig, node_id: int, running_version: int = 1):
        super().__init__(host)
        self.cfg = cfg
        self.node_id = node_id
        self.running_version = running_version
        self.session: OtaSession | None = None
        self.rebroadcast: deque[tuple[int, float]] = deque()  # (index, not before)
        self.heard: dict[int, int] = {}
        self.waiting: dict[int, set[int]] = {}
        self.staged_at: float | None = None
        self.started_at: float | None = None
        self._nack_ev = None
        self._timeout_ev = None
        self._progress_mark = 0
        self._reported = 0
        self._up_nack_at = -math.inf
        self.reboot_pending = False
        self.digest_failures = 0
        self.eop_seen: set[int] = set()
        self.eop_stripes = 1

    # -- lifecycle --------------------------------------------------------------

    def power_loss(self) -> None:
        """Volatile state is lost; a staged image survives in flash."""
        self.reset()
        for ev in (self._nack_ev, self._timeout_ev):
            if ev is not None:
                self.host.cancel(ev)
        self._nack_ev = self._timeout_ev = None
        self.rebroadcast.clear()
        self.heard.clear()
        self.waiting.clear()
        self.eop_seen.clear()
        self.reboot_pending = False
        s = self.session
        if s is not None and s.phase not in (Phase.STAGED, Phase.ACTIVATED):
            self.session = None

    def resume(self) -> None:
        """After a reboot: keep serving staged chunks; nothing else to restart."""

    # -- flood ----------------------------------------------------------------------

    def _new_session(self, body: OtaDataBody) -> OtaSession | None:
        if body.version <= self.running_version:
            return None
        s = self.session
        if s is not None and (s.image_id, s.version) == (body.image_id, body.version):
            return s
        if s is not None and body.version <= s.version:
            return None
        self.power_loss_session()
        self.session = OtaSession(body.image_id, body.version)
        self.started_at = self.host.now
        self._reported = 0
        self._arm_timeout()
        return self.session

    def power_loss_session(self) -> None:
        self.eop_seen.clear()
        self.rebroadcast.clear()
        self.heard.clear()
        self.waiting.clear()
        self.serve.clear()
        self.staged_at = None

    def on_data(self, body: OtaDataBody, sender: int, broadcast: bool) -> None:
        s = self._new_session(body)
        if s is None:
            return
        idx = body.chunk_index
        if idx == MANIFEST_INDEX:
            try:
                manifest = ImageManifest.unpack(body.image_id, body.version, body.data)
            except ValueError:
                return
            first = s.set_manifest(manifest)
            self._flood(idx, first, broadcast)
            if first:
                self._arm_timeout()
                if s.received:
                    self._progress()  # chunks heard before the manifest may already complete it
        elif idx == END_OF_PROPAGATION:
            # with several gateways each ends its own stripe; recover only once all have ended
            k, n = parse_eop(body.data)
            first = k not in self.eop_seen
            self.eop_seen.add(k)
            self.eop_stripes = n
            if first and len(self.eop_seen) >= n:
                self._enter_recovery()
            self._flood(_EOP_KEY + k, first, broadcast)
        else:
            if s.phase in (Phase.STAGED, Phase.ACTIVATED):
                self._flood(idx, False, broadcast)
                return
            new = s.add_chunk(idx, body.data)
            if s.manifest is None and s.phase is Phase.PROPAGATION:
                self._arm_timeout()
            self._flood(idx, new, broadcast)
            if new:
                waiting = self.waiting.pop(idx, ())
                if not broadcast:
                    # a flooded copy reaches waiting children through our rebroadcast (or theirs)
                    for child in sorted(waiting):
                        self.add_serve(child, idx)
                self._progress()
        self.kick()

    def _flood(self, idx: int, first: bool, broadcast: bool) -> None:
        if not broadcast:
            return
        if first:
            # a random hold lets neighbours' copies suppress ours and spreads hidden-terminal collisions
            self.heard[idx] = 0
            delay = self.host.rng.uniform(0.0, self.cfg.rebroadcast_delay_s)
            self.rebroadcast.append((idx, self.host.now + delay))
        elif idx in self.heard:
            self.heard[idx] += 1

    def _wanted(self, idx: int):
        return lambda: self.heard.get(idx, 0) < self.cfg.suppress_after

    def _progress(self) -> None:
        s = self.session
        pct = s.percent()
        step = self.cfg.progress_step
        while self._reported + step <= pct and self._reported < 100:
            self._reported += step
            self.host.ota_event("ota_progress", image_id=s.image_id, percent=self._reported)
        if s.complete:
            self._finish()

    def _finish(self) -> None:
        s = self.session
        try:
            s.finalize()
        except DigestMismatch:
            self.digest_failures += 1
            self.host.ota_event("fault", reason="digest_mismatch", image_id=s.image_id)
            self._reported = 0
            self._schedule_nack(self.cfg.nack_base_s)
            return
        self.staged_at = self.host.now
        for ev in (self._nack_ev, self._timeout_ev):
            if ev is not None:
                self.host.cancel(ev)
        self._nack_ev = self._timeout_ev = None
        self.host.ota_event("ota_staged", image_id=s.image_id, version=s.version)

    # -- recovery -------------------------------------------------------------------

    def _arm_timeout(self) -> None:
        if self._timeout_ev is not None:
            self.host.cancel(self._timeout_ev)
        m = self.session.manifest
        if m is None:
            # image size unknown: fall back to a silence timer, re-armed by every chunk, so a
            # node that missed both the manifest and the end of the flood asks for the manifest
            per_frame = self.host.ota_airtime(_ota_frame_len(MAX_CHUNK))
            span = self.cfg.silence_intervals * per_frame / self.host.duty_limit
        else:
            per_frame = self.host.ota_airtime(_ota_frame_len(m.chunk_size))
            span = m.chunk_count * per_frame / self.host.duty_limit
        self._timeout_ev = self.host.schedule(self.host.now + 2 * span, self._timeout)

    def _timeout(self) -> None:
        self._timeout_ev = None
        s = self.session
        if s is not None and s.phase is Phase.PROPAGATION:
            self._enter_recovery()

    def _enter_recovery(self) -> None:
        s = self.session
        if s.phase is not Phase.PROPAGATION:
            return
        s.phase = Phase.RECOVERY
        if s.complete:
            return
        self._schedule_nack(self.host.rng.uniform(0.0, self.cfg.nack_base_s))

    def _schedule_nack(self, delay: float) -> None:
        if self._nack_ev is not None:
            self.host.cancel(self._nack_ev)
        self._nack_ev = self.host.schedule(self.host.now + delay, self._nack)

    def _nack(self) -> None:
        self._nack_ev = None
        s = self.session
        if s is None or s.phase is not Phase.RECOVERY:
            return
        if s.received > self._progress_mark:
            s.nack_round = 0
        else:
            s.nack_round += 1
        self._progress_mark = s.received
        delay = min(self.cfg.nack_base_s * 2 ** s.nack_round, self.cfg.nack_cap_s)
        self._schedule_nack(delay)
        parent = self.host.parent
        if parent is None:
            return  # ParentNoRoute: try again after the backoff, by then we may have a parent
        if s.manifest is None:
            ranges = [(MANIFEST_INDEX, 1)]
        else:
            ranges = missing_ranges(s)[:MAX_NACK_RANGES]
        if ranges:
            self._send_nack(parent, ranges)

    def _send_nack(self, parent: int, ranges) -> None:
        body = OtaNackBody(self.session.image_id, tuple(ranges))
        self.host.send_ota(FrameKind.OTA_NACK, body.pack(), parent, None, None)

    def on_nack(self, body: OtaNackBody, child: int) -> None:
        s = self.session
        if s is None or s.image_id != body.image_id:
            return
        lacking = []
        for first, count in body.ranges:
            if first == MANIFEST_INDEX:
                if s.manifest is not None:
                    self.add_serve(child, MANIFEST_INDEX)
                continue
            for idx in range(first, min(first + count, 0x10000)):
                if s.manifest is not None and idx >= s.manifest.chunk_count:
                    break
                if s.has(idx):
                    self.add_serve(child, idx)
                else:
                    self.waiting.setdefault(idx, set()).add(child)
                    lacking.append(idx)
        if lacking and self.host.parent is not None and self.host.now - self._up_nack_at >= self.cfg.nack_base_s:
            self._up_nack_at = self.host.now
            self._send_nack(self.host.parent, ranges_of_indices(lacking)[:MAX_NACK_RANGES])
        self.kick()

    # -- pump --------------------------------------------------------------------------

    def next_item(self):
        s = self.session
        if s is None:
            return None
        repair = self._next_repair(s)
        if repair is not None and not self.served_last:
            return repair
        while self.rebroadcast:
            idx, not_before = self.rebroadcast[0]
            if self.heard.get(idx, 0) >= self.cfg.suppress_after:
                self.rebroadcast.popleft()
                continue
            if not_before > self.host.now:
                if repair is None:
                    self._ev = self.host.schedule(not_before, self._wake)
                return repair
            if idx == MANIFEST_INDEX:
                return (BROADCAST, idx, ImageManifest._wire.size)
            if idx >= _EOP_KEY:
                return (BROADCAST, idx, 2)
            if idx in s.chunks:
                return (BROADCAST, idx, len(s.chunks[idx]))
            self.rebroadcast.popleft()
        return repair

    def _next_repair(self, s: OtaSession):
        """Head of the serve queue, dropping requests this node cannot answer."""
        while self.serve:
            child, idx = self.serve.peek()
            if idx == MANIFEST_INDEX and s.manifest is not None:
                return (child, idx, ImageManifest._wire.size)
            if idx in s.chunks:
                return (child, idx, len(s.chunks[idx]))
            self.serve.pop()
        return None

    def pop(self, item) -> None:
        dst, idx, _ = item
        self.served_last = dst != BROADCAST
        if dst == BROADCAST:
            self.rebroadcast.popleft()
        else:
            self.serve.pop()

    def frame(self, dst: int, idx: int):
        s = self.session
        wanted = self._wanted(idx) if dst == BROADCAST else None
        if idx >= _EOP_KEY:
            data = eop_payload((idx - _EOP_KEY, self.eop_stripes))
            return OtaDataBody(s.image_id, s.version, END_OF_PROPAGATION, data).pack(), wanted
        data = s.manifest.pack() if idx == MANIFEST_INDEX else s.chunks[idx]
        return OtaDataBody(s.image_id, s.version, idx, data).pack(), wanted

    # -- activation ------------------------------------------------------------------------

    def activate(self, image_id: int) -> bool:
        s = self.session
        if s is None or s.image_id != image_id or s.phase is not Phase.STAGED:
            self.host.ota_event("fault", reason="not_staged", image_id=image_id)
            return False
        if self.reboot_pending:
            return True
        self.reboot_pending = True
        delay = self.host.rng.uniform(0.0, self.cfg.reboot_window_s)
        self.host.ota_reboot(delay, s.version)
        return True

    def activated(self) -> None:
        s = self.session
        self.running_version = s.version
        s.phase = Phase.ACTIVATED
        self.reboot_pending = False

    def corrupt_chunk(self, idx: int, bit: int = 0) -> None:
        """Test hook: flip one bit of a cached chunk (models flash corruption)."""
        data = bytearray(self.session.chunks[idx])
        data[bit // 8] ^= 1 << (bit % 8)
        self.session.chunks[idx] = bytes(data)


def ranges_of_indices(indices) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for idx in sorted(set(indices)):
        if out and out[-1][0] + out[-1][1] == idx:
            out[-1] = (out[-1][0], out[-1][1] + 1)
        else:
            out.append((idx, 1))
    return out


class OtaSource(_Pump):
    """Gateway side: paced broadcast of the whole image, then serving NACKs."""

    def __init__(self, host, cfg: OtaConfig, image: bytes, image_id: int, version: int,
                 stripe: tuple[int, int] = (0, 1)):
        super().__init__(host)
        self.cfg = cfg
        self.manifest, self.chunks = chunk_image(image, cfg.chunk_size, image_id, version)
        k, n = stripe
        if not 0 <= k < n:
            raise ValueError(f"bad stripe {stripe}")
        self.stripe = (k, n)
        self.plan = self._plan()
        self.position = 0
        # chunks still ahead in our own flood: NACKs for them are answered by the flood itself,
        # serving them by unicast first would starve the flood behind the repair queue
        self.unflooded = {i for i in self.plan if i < MANIFEST_INDEX}
        self.started_at = host.now
        self.propagated_at: float | None = None

    def _plan(self) -> list[int]:
        """Broadcast order: this gateway's stripe of chunks, manifest every ``manifest_every``."""
        k, n = self.stripe
        order = []
        for i in range(self.manifest.chunk_count):
            if i % self.cfg.manifest_every == 0:
                order.append(MANIFEST_INDEX)
            if i % n == k:
                order.append(i)
        order.append(END_OF_PROPAGATION)
        return order

    @property
    def done(self) -> bool:
        return self.position >= len(self.plan)

    def on_nack(self, body: OtaNackBody, child: int) -> None:
        if body.image_id != self.manifest.image_id:
            return
        for first, count in body.ranges:
            if first == MANIFEST_INDEX:
                self.add_serve(child, MANIFEST_INDEX)
                continue
            for idx in range(first, min(first + count, self.manifest.chunk_count)):
                if idx not in self.unflooded:
                    self.add_serve(child, idx)
        self.kick()

    def _len(self, idx: int) -> int:
        if idx == MANIFEST_INDEX:
            return ImageManifest._wire.size
        if idx == END_OF_PROPAGATION:
            return 2
        return self.manifest.chunk_size

    def next_item(self):
        if self.serve and (self.done or not self.served_last):
            child, idx = self.serve.peek()
            return (child, idx, self._len(idx))
        if not self.done:
            idx = self.plan[self.position]
            return (BROADCAST, idx, self._len(idx))
        return None

    def pop(self, item) -> None:
        dst, idx, _ = item
        self.served_last = dst != BROADCAST
        if dst == BROADCAST:
            self.unflooded.discard(self.plan[self.position])
            self.position += 1
            if self.done:
                self.propagated_at = self.host.now
        else:
            self.serve.pop()

    def frame(self, dst: int, idx: int):
        m = self.manifest
        if idx == MANIFEST_INDEX:
            data = m.pack()
        elif idx == END_OF_PROPAGATION:
            data = eop_payload(self.stripe)
        else:
            data = self.chunks[idx]
        return OtaDataBody(m.image_id, m.version, idx, data).pack(), None
