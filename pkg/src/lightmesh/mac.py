"""Channel access: duty-cycle budget, priority queue, CSMA and unicast ARQ."""
from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

from .frames import BROADCAST, AckBody, Frame, FrameKind, PhyParams, airtime, encode_frame

_EPS = 1e-9


class Priority(IntEnum):
    CONTROL = 0
    OTA = 1
    DATA = 2


class QueueFull(Exception):
    """Raised when a frame cannot be queued and nothing less important can be evicted."""


class BudgetExceeded(ValueError):
    """A single frame is longer than the whole duty budget."""


@dataclass
class MacConfig:
    duty_limit: float = 0.01
    duty_window_s: float = 3600.0
    queue_capacity: int = 64
    max_retries: int = 3
    ack_turnaround_s: float = 0.01
    ack_extra_s: float = 0.1
    backoff_base_s: float = 0.5
    broadcast_jitter_s: float = 0.5
    cs_jitter_s: float = 0.2
    ota_reserve_s: float = 6.0
    ota_headroom: float = 0.5


class DutyBudget:
    """Per-node airtime accounting over a sliding window.

    A transmission of length ``a`` may start at ``t`` only if the airtime
    inside ``[t + a - window, t + a)`` including itself stays within
    ``limit * window``.
    """

    def __init__(self, limit: float = 0.01, window: float = 3600.0):
        if not 0 < limit <= 1:
            raise ValueError("duty limit must be in (0, 1]")
        self.limit = limit
        self.window = window
        self.capacity = limit * window
        self._log: deque[tuple[float, float]] = deque()
        self._total = 0.0

    def _trim(self, now: float) -> None:
        horizon = now - self.window
        while self._log and self._log[0][1] <= horizon:
            s, e = self._log.popleft()
            self._total -= e - s
        if not self._log:
            self._total = 0.0

    def used_since(self, start: float) -> float:
        # the log is time-ordered: subtract only the head entries that precede ``start``
        total = self._total
        for s, e in self._log:
            if s >= start:
                break
            total -= min(e, start) - s
        return max(total, 0.0)

    def used(self, now: float) -> float:
        """Airtime spent inside the window ending at ``now``."""
        self._trim(now)
        return self.used_since(now - self.window)

    def available(self, now: float) -> float:
        return self.capacity - self.used(now)

    def earliest_start(self, now: float, duration: float, reserve: float = 0.0) -> float:
        """Earliest start >= now for a frame of ``duration`` s, keeping ``reserve`` s unused."""
        cap = self.capacity - reserve - duration
        if cap < -_EPS and reserve == 0.0:
            raise BudgetExceeded(f"{duration:.3f} s frame exceeds the {self.capacity:.1f} s budget")
        self._trim(now)
        origin = now + duration - self.window
        excess = self.used_since(origin) - cap
        if excess <= _EPS:
            return now
        if cap < 0:
            # reserve can only be honoured once the whole window has drained
            return (self._log[-1][1] if self._log else now) + self.window - duration + _EPS
        for s, e in self._log:
            if e <= origin:
                continue
            s = max(s, origin)
            if e - s >= excess:
                return s + excess + self.window - duration + _EPS
            excess -= e - s
        return now  # unreachable with a consistent log

    def record(self, start: float, duration: float) -> None:
        self._log.append((start, start + duration))
        self._total += duration


@dataclass(eq=False)
class TxRequest:
    kind: FrameKind
    payload: bytes
    priority: Priority
    dst: int | None = BROADCAST  # None: resolve the next hop at send time
    ttl: int = 0
    on_done: Callable[[bool], None] | None = None
    still_wanted: Callable[[], bool] | None = None
    packet: tuple[int, int] | None = None
    not_before: float = 0.0
    enq_seq: int = 0
    # filled in when the request is first put on the air
    seq: int | None = None
    link_dst: int | None = None
    data: bytes | None = None
    frame: Frame | None = None
    attempts: int = 0

    @property
    def broadcast(self) -> bool:
        return self.dst == BROADCAST


class TxQueue:
    """Bounded queue ordered by (priority, arrival)."""

    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self.entries: list[TxRequest] = []
        self._counter = itertools.count()

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, req: TxRequest) -> TxRequest | None:
        """Queue ``req``; returns the evicted entry when the queue was full."""
        req.enq_seq = next(self._counter)
        evicted = None
        if len(self.entries) >= self.capacity:
            victims = [e for e in self.entries if e.priority >= req.priority]
            if not victims:
                raise QueueFull("queue full of higher-priority frames")
            worst = max(v.priority for v in victims)
            evicted = min((v for v in victims if v.priority == worst), key=lambda v: v.enq_seq)
            self.entries.remove(evicted)
        self.entries.append(req)
        return evicted

    def head(self, sendable: Callable[[TxRequest], bool]) -> TxRequest | None:
        best = None
        for e in self.entries:
            if not sendable(e):
                continue
            if best is None or (e.priority, e.enq_seq) < (best.priority, best.enq_seq):
                best = e
        return best

    def remove(self, req: TxRequest) -> None:
        self.entries.remove(req)

    def clear(self) -> list[TxRequest]:
        out, self.entries = self.entries, []
        return out


class Mac:
    """Single-radio MAC for one node, driven by simulator events.

    ``host`` supplies ``next_hop(req)``, ``on_unicast_result(dst, attempts,
    acked)``, ``on_evicted(req)`` and ``on_dropped(req, reason)``. ``sim``
    supplies ``now``, ``schedule``, ``cancel`` and ``channel``.
    """

    IDLE, WAITING, SENDING, AWAIT_ACK = range(4)

    def __init__(self, node_id: int, host, sim, cfg: MacConfig, phy: PhyParams, key: bytes, rng):
        self.id = node_id
        self.host = host
        self.sim = sim
        self.cfg = cfg
        self.phy = phy
        self.key = key
        self.rng = rng
        self.queue = TxQueue(cfg.queue_capacity)
        self.budget = DutyBudget(cfg.duty_limit, cfg.duty_window_s)
        self.ota_budget = DutyBudget(1.0, cfg.duty_window_s)  # OTA share of the same log
        self.started_at = sim.now
        self.last_ota_tx = -math.inf
        self.state = self.IDLE
        self.current: TxRequest | None = None
        self._event = None
        self._seq = 0
        self.busy_until = 0.0
        self.tx_log: list[tuple[float, float]] = []
        self.evictions = 0
        self.ack_air_s = airtime(phy, Frame(FrameKind.ACK, 0, 0, 0, 0, b"\0\0").encoded_len) / 1000.0
        self.ack_timeout_s = 2 * self.ack_air_s + cfg.ack_extra_s
        self._airtime_cache: dict[int, float] = {}

    # -- helpers ------------------------------------------------------------

    def airtime_s(self, length: int) -> float:
        a = self._airtime_cache.get(length)
        if a is None:
            a = self._airtime_cache[length] = airtime(self.phy, length) / 1000.0
        return a

    def next_seq(self) -> int:
        self._seq = (self._seq + 1) & 0xFFFF
        return self._seq

    def ota_reserve(self, now: float) -> float:
        """Budget kept free of OTA frames, on top of what the window already holds.

        Non-OTA traffic is assumed to keep its recent rate; the reserve is a floor or
        a margin proportional to that rate, whichever is larger.
        """
        other = self.budget.used(now) - self.ota_budget.used(now)
        elapsed = now - self.started_at
        if 0 < elapsed < self.cfg.duty_window_s:
            other *= self.cfg.duty_window_s / elapsed  # young window: extrapolate the rate
        return max(self.cfg.ota_reserve_s, self.cfg.ota_headroom * other)

    def ota_earliest(self, now: float, dur: float) -> float:
        """Earliest start for an OTA frame of ``dur`` s.

        OTA frames are paced evenly at the rate the spare budget allows rather
        than spent in a burst whenever the sliding window has room.
        """
        reserve = self.ota_reserve(now)
        t = self.budget.earliest_start(max(now, self.busy_until), dur, reserve=reserve)
        allowance = self.budget.capacity - reserve
        if allowance > dur:
            t = max(t, self.last_ota_tx + dur * self.cfg.duty_window_s / allowance)
        return t

    def _sendable(self, req: TxRequest) -> bool:
        return req.dst is not None or self.host.next_hop(req) is not None

    # -- public API -----------------------------------------------------------

    def submit(self, req: TxRequest) -> TxRequest | None:
        """Queue a frame. Returns the evicted request, if any (also reported to the host)."""
        now = self.sim.now
        if req.broadcast:
            req.not_before = now + self.rng.uniform(0.0, self.cfg.broadcast_jitter_s)
        else:
            req.not_before = now
        evicted = self.queue.push(req)
        if evicted is not None:
            self.evictions += 1
            self.host.on_evicted(evicted)
        self.kick()
        return evicted

    def pending(self, priority: Priority | None = None) -> int:
        n = sum(1 for e in self.queue.entries if priority is None or e.priority == priority)
        if self.current is not None and (priority is None or self.current.priority == priority):
            n += 1
        return n

    def kick(self) -> None:
        """Re-evaluate the queue; called whenever something may have become sendable."""
        if self.state == self.IDLE:
            self._arm(self.sim.now)

    def reset(self) -> list[TxRequest]:
        """Power loss: drop everything. Returns the requests that were in the MAC."""
        if self._event is not None:
            self.sim.cancel(self._event)
            self._event = None
        lost = self.queue.clear()
        if self.current is not None:
            lost.append(self.current)
        self.current = None
        self.state = self.IDLE
        return lost

    # -- state machine --------------------------------------------------------

    def _arm(self, t: float) -> None:
        if self._event is not None:
            self.sim.cancel(self._event)
        self.state = self.WAITING
        self._event = self.sim.schedule(max(t, self.sim.now), self._attempt)

    def _attempt(self) -> None:
        self._event = None
        now = self.sim.now
        req = self.current
        if req is None:
            while True:
                req = self.queue.head(self._sendable)
                if req is None:
                    self.state = self.IDLE
                    return
                if req.still_wanted is not None and not req.still_wanted():
                    self.queue.remove(req)
                    if req.on_done:
                        req.on_done(False)
                    continue
                break
            if req.not_before > now:
                self._arm(req.not_before)
                return
        if req.data is None:
            self._prepare(req)
            if req.data is None:
                self.state = self.IDLE
                return
        dur = self.airtime_s(len(req.data))
        start = max(now, self.busy_until)
        t_ok = self.budget.earliest_start(start, dur)
        if t_ok > now + _EPS:
            self._arm(t_ok)
            return
        busy = self.sim.channel.busy_until(self.id, now)
        if busy > now:
            self._arm(busy + self.rng.uniform(0.0, self.cfg.cs_jitter_s))
            return
        if self.current is None:
            self.queue.remove(req)
            self.current = req
        self._transmit(req, dur)

    def _prepare(self, req: TxRequest) -> None:
        dst = req.dst if req.dst is not None else self.host.next_hop(req)
        if dst is None:
            return
        req.link_dst = dst
        req.seq = self.next_seq()
        req.frame = Frame(req.kind, self.id, dst, req.seq, req.ttl, req.payload)
        req.data = encode_frame(req.frame, self.key)

    def _transmit(self, req: TxRequest, dur: float) -> None:
        now = self.sim.now
        req.attempts += 1
        self.state = self.SENDING
        self.budget.record(now, dur)
        if req.priority is Priority.OTA:
            self.ota_budget.record(now, dur)
            self.last_ota_tx = now
        self.tx_log.append((now, now + dur))
        self.busy_until = now + dur
        self.sim.channel.transmit(self.id, req.frame, req.data, dur)
        self._event = self.sim.schedule(now + dur, self._tx_done)

    def _tx_done(self) -> None:
        self._event = None
        req = self.current
        if req.frame.is_broadcast:
            self._finish(True)
            return
        self.state = self.AWAIT_ACK
        self._event = self.sim.schedule(self.sim.now + self.ack_timeout_s, self._ack_timeout)

    def _ack_timeout(self) -> None:
        self._event = None
        req = self.current
        if req.attempts > self.cfg.max_retries:
            self.host.on_unicast_result(req.link_dst, req.attempts, False)
            self._finish(False)
            return
        backoff = self.rng.uniform(0.0, self.cfg.backoff_base_s * (2 ** req.attempts))
        self._arm(self.sim.now + backoff)

    def on_ack(self, src: int, acked_seq: int) -> None:
        req = self.current
        if (
            self.state != self.AWAIT_ACK
            or req is None
            or req.link_dst != src
            or req.seq != acked_seq
        ):
            return
        if self._event is not None:
            self.sim.cancel(self._event)
            self._event = None
        self.host.on_unicast_result(src, req.attempts, True)
        self._finish(True)

    def _finish(self, ok: bool) -> None:
        req, self.current = self.current, None
        self.state = self.IDLE
        if req.on_done:
            req.on_done(ok)
        self.kick()

    def send_ack(self, to: int, acked_seq: int) -> bool:
        """Immediate link-layer ACK; skipped when the radio or the budget is busy."""
        start = self.sim.now + self.cfg.ack_turnaround_s
        if self.state == self.SENDING or self.busy_until > start:
            return False
        dur = self.ack_air_s
        if self.budget.earliest_start(start, dur) > start + _EPS:
            return False
        frame = Frame(FrameKind.ACK, self.id, to, self.next_seq(), 0, AckBody(acked_seq).pack())
        data = encode_frame(frame, self.key)
        self.busy_until = start + dur
        self.budget.record(start, dur)
        self.tx_log.append((start, start + dur))
        self.sim.schedule(start, self.sim.channel.transmit, self.id, frame, data, dur)
        return True
