"""Root-node northbound bridge: telemetry records, dedupe and operator commands.

The northbound stream is an append-only list of :class:`TelemetryRecord`.
Every gateway publishes what it hears; :class:`Northbound` keeps the raw
per-gateway stream and a merged stream deduplicated on ``(node, seq mod
2^16)`` within a sliding window. Export is newline-delimited JSON with
sorted keys (one record per line, see ``docs`` in the README).
"""
from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Protocol

from .frames import (
    MAX_TTL,
    AppKind,
    CmdOp,
    DataBody,
    EventBody,
    EventCode,
    Frame,
    Malformed,
    StatusBody,
)
from .routing import NoRoute

DEDUPE_WINDOW_S = 600.0


class RecordKind(str, Enum):
    STATUS = "status"
    OTA_PROGRESS = "ota_progress"
    FAULT = "fault"
    EVICTION = "eviction"
    ROUTE_LOSS = "route_loss"
    ENDPOINT = "endpoint"
    ECHO = "echo"
    TOPOLOGY = "topology"
    COMMAND = "command"


@dataclass(frozen=True)
class TelemetryRecord:
    t: float
    node: int
    kind: RecordKind
    gateway: int | None = None
    seq: int | None = None
    hop_count: int | None = None
    data: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "t": round(self.t, 6),
            "node": self.node,
            "kind": self.kind.value,
            "gateway": self.gateway,
            "seq": self.seq,
            "hop_count": self.hop_count,
            "data": self.data,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))


def hop_count(frame: Frame) -> int:
    """Hops travelled by an uplink: originators send with ttl 15, each relay decrements."""
    return MAX_TTL - frame.ttl + 1


def handle_uplink(gateway_id: int, now: float, frame: Frame) -> TelemetryRecord | None:
    """Turn a DATA frame that reached a root into a telemetry record.

    Returns None for uplinks that are routing control rather than telemetry
    (repair requests). Raises Malformed for undecodable bodies.
    """
    body = DataBody.unpack(frame.payload)
    common = dict(gateway=gateway_id, seq=body.origin_seq, hop_count=hop_count(frame))
    app = body.app
    if app is AppKind.STATUS:
        st = StatusBody.unpack(body.body)
        data = {
            "firmware_version": st.firmware_version,
            "rank": st.rank,
            "parent": st.parent,
            "ota_percent": st.ota_percent,
            "evictions": st.evictions,
        }
        return TelemetryRecord(now, body.origin, RecordKind.STATUS, data=data, **common)
    if app is AppKind.PONG:
        if len(body.body) != 2:
            raise Malformed("bad pong body")
        (cmd_seq,) = struct.unpack(">H", body.body)
        return TelemetryRecord(now, body.origin, RecordKind.ECHO, data={"cmd_seq": cmd_seq}, **common)
    if app is AppKind.ATTACHED:
        if len(body.body) != 2:
            raise Malformed("bad endpoint body")
        (endpoint,) = struct.unpack(">H", body.body)
        return TelemetryRecord(now, body.origin, RecordKind.ENDPOINT, data={"endpoint": endpoint}, **common)
    if app is AppKind.EVENT:
        ev = EventBody.unpack(body.body)
        code = ev.code
        if code is EventCode.OTA_PROGRESS:
            kind, data = RecordKind.OTA_PROGRESS, {"image_id": ev.a, "percent": ev.b, "staged": False}
        elif code is EventCode.OTA_STAGED:
            kind, data = RecordKind.OTA_PROGRESS, {"image_id": ev.a, "percent": 100, "staged": True, "version": ev.b}
        elif code is EventCode.DIGEST_MISMATCH:
            kind, data = RecordKind.FAULT, {"reason": "digest_mismatch", "image_id": ev.a}
        elif code is EventCode.NOT_STAGED:
            kind, data = RecordKind.FAULT, {"reason": "not_staged", "image_id": ev.a}
        elif code is EventCode.EVICTION:
            kind, data = RecordKind.EVICTION, {"evictions": ev.a}
        else:
            kind, data = RecordKind.ROUTE_LOSS, {"dest": ev.a}
        return TelemetryRecord(now, body.origin, kind, data=data, **common)
    return None


class Northbound:
    """Append-only record stream shared by all gateways of a site."""

    def __init__(self, window_s: float = DEDUPE_WINDOW_S):
        self.window_s = window_s
        self.raw: list[TelemetryRecord] = []
        self.merged: list[TelemetryRecord] = []
        self.malformed = 0
        self.duplicates = 0
        self._seen: dict[tuple[int, int], float] = {}
        self._expiry: deque[tuple[float, tuple[int, int]]] = deque()
        self.pending_pings: dict[int, tuple[int, float]] = {}

    def _expire(self, now: float) -> None:
        horizon = now - self.window_s
        while self._expiry and self._expiry[0][0] <= horizon:
            t, key = self._expiry.popleft()
            if self._seen.get(key) == t:
                del self._seen[key]

    def publish(self, rec: TelemetryRecord) -> bool:
        """Add a gateway-received record; returns False when it is a duplicate."""
        self.raw.append(rec)
        if rec.seq is not None:
            self._expire(rec.t)
            key = (rec.node, rec.seq & 0xFFFF)
            if key in self._seen:
                self.duplicates += 1
                return False
            self._seen[key] = rec.t
            self._expiry.append((rec.t, key))
        if rec.kind is RecordKind.ECHO and "cmd_seq" in rec.data:
            pending = self.pending_pings.pop(rec.data["cmd_seq"], None)
            if pending is None:
                return True  # late echo after the timeout record; keep raw only
            target, issued = pending
            rec = TelemetryRecord(
                rec.t, rec.node, rec.kind, rec.gateway, rec.seq, rec.hop_count,
                {"cmd_seq": rec.data["cmd_seq"], "ok": True, "rtt_s": round(rec.t - issued, 6)},
            )
        self.merged.append(rec)
        return True

    def emit(self, t: float, node: int, kind: RecordKind, gateway: int | None = None, **data) -> TelemetryRecord:
        """Record originated by the bridge itself (command acks, errors, snapshots)."""
        rec = TelemetryRecord(t, node, kind, gateway=gateway, data=data)
        self.raw.append(rec)
        self.merged.append(rec)
        return rec

    def write_ndjson(self, fp: IO[str], merged: bool = True) -> int:
        n = 0
        for rec in self.merged if merged else self.raw:
            fp.write(rec.to_json())
            fp.write("\n")
            n += 1
        return n


def dedupe(streams: Iterable[Iterable[TelemetryRecord]], window_s: float = DEDUPE_WINDOW_S) -> list[TelemetryRecord]:
    """Merge per-gateway streams in time order, keeping one record per (node, seq)."""
    nb = Northbound(window_s)
    everything = sorted(
        (rec for stream in streams for rec in stream),
        key=lambda r: (r.t, r.gateway if r.gateway is not None else -1, r.node),
    )
    for rec in everything:
        nb.publish(rec)
    return nb.merged


# --- commands -------------------------------------------------------------------


class CommandKind(str, Enum):
    OTA_START = "ota_start"
    OTA_ACTIVATE = "ota_activate"
    QUERY_TOPOLOGY = "query_topology"
    PING = "ping"


class NorthboundError(Exception):
    pass


@dataclass
class Command:
    kind: CommandKind
    issued_at: float
    image: bytes | None = None
    image_id: int = 1
    version: int = 2
    node: int | None = None


class GatewayPort(Protocol):
    """What the bridge needs from a gateway node."""

    id: int

    def start_ota(self, image: bytes, image_id: int, version: int, stripe: tuple[int, int] = (0, 1)) -> None: ...
    def flood_command(self, op: CmdOp, arg: int, cmd_seq: int) -> None: ...
    def route_command(self, target: int, op: CmdOp, arg: int, cmd_seq: int) -> None: ...
    def has_route(self, node: int) -> bool: ...


class CommandBridge:
    """Cloud-side command dispatch across all gateways of a site."""

    def __init__(self, northbound: Northbound, gateways: list, schedule, ping_timeout_s: float = 120.0):
        self.nb = northbound
        self.gateways = sorted(gateways, key=lambda g: g.id)
        self.schedule = schedule
        self.ping_timeout_s = ping_timeout_s
        self.started: dict[int, int] = {}
        self._cmd_seq = 0

    def _next_seq(self) -> int:
        self._cmd_seq = (self._cmd_seq + 1) & 0xFFFF
        return self._cmd_seq

    def dispatch(self, cmd: Command, topology=None) -> list[TelemetryRecord]:
        """Execute ``cmd``; always returns at least one northbound record."""
        t = cmd.issued_at
        kind = CommandKind(cmd.kind)
        out: list[TelemetryRecord] = []
        if not self.gateways:
            raise NorthboundError("no gateway attached")
        if kind is CommandKind.OTA_START:
            if not cmd.image:
                out.append(self.nb.emit(t, 0, RecordKind.COMMAND, command=kind.value, status="rejected",
                                        reason="empty image"))
                return out
            # each gateway propagates one stripe of the chunks; relays flood them network-wide
            live = [gw for gw in self.gateways if getattr(gw, "alive", True)] or self.gateways
            for k, gw in enumerate(live):
                gw.start_ota(cmd.image, cmd.image_id, cmd.version, (k, len(live)))
            self.started[cmd.image_id] = cmd.version
            out.append(self.nb.emit(t, 0, RecordKind.COMMAND, command=kind.value, status="accepted",
                                    image_id=cmd.image_id, version=cmd.version, bytes=len(cmd.image)))
        elif kind is CommandKind.OTA_ACTIVATE:
            if cmd.image_id not in self.started:
                out.append(self.nb.emit(t, 0, RecordKind.COMMAND, command=kind.value, status="rejected",
                                        reason="unknown image", image_id=cmd.image_id))
                return out
            seq = self._next_seq()
            for gw in self.gateways:
                gw.flood_command(CmdOp.OTA_ACTIVATE, cmd.image_id, seq)
            out.append(self.nb.emit(t, 0, RecordKind.COMMAND, command=kind.value, status="accepted",
                                    image_id=cmd.image_id, cmd_seq=seq))
        elif kind is CommandKind.PING:
            target = cmd.node
            gw = next((g for g in self.gateways if g.has_route(target)), None)
            if gw is None:
                out.append(self.nb.emit(t, target, RecordKind.ROUTE_LOSS, reason="no_route", dest=target))
                return out
            seq = self._next_seq()
            try:
                gw.route_command(target, CmdOp.PING, 0, seq)
            except NoRoute:
                out.append(self.nb.emit(t, target, RecordKind.ROUTE_LOSS, gateway=gw.id, reason="no_route",
                                        dest=target))
                return out
            self.nb.pending_pings[seq] = (target, t)
            self.schedule(t + self.ping_timeout_s, self._ping_timeout, seq)
            out.append(self.nb.emit(t, target, RecordKind.COMMAND, gateway=gw.id, command=kind.value,
                                    status="accepted", cmd_seq=seq))
        elif kind is CommandKind.QUERY_TOPOLOGY:
            rows = topology or []
            for row in rows:
                out.append(self.nb.emit(t, row["node"], RecordKind.TOPOLOGY,
                                        **{k: v for k, v in row.items() if k != "node"}))
            out.append(self.nb.emit(t, 0, RecordKind.COMMAND, command=kind.value, status="accepted",
                                    nodes=len(rows)))
        return out

    def _ping_timeout(self, seq: int, now: float | None = None) -> None:
        pending = self.nb.pending_pings.pop(seq, None)
        if pending is None:
            return
        target, issued = pending
        self.nb.emit(issued + self.ping_timeout_s, target, RecordKind.ECHO, cmd_seq=seq, ok=False)


def topology_view(records: Iterable[TelemetryRecord]) -> list[dict]:
    """Latest reported (parent, rank, gateway) per node, as the cloud sees it."""
    latest: dict[int, TelemetryRecord] = {}
    for rec in records:
        if rec.kind is RecordKind.STATUS:
            latest[rec.node] = rec
    return [
        {"node": n, "parent": r.data["parent"], "rank": r.data["rank"], "gateway": r.gateway, "as_of": round(r.t, 6)}
        for n, r in sorted(latest.items())
    ]
