"""Discrete-event core: event queue, shared radio channel and the simulator."""
from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from typing import IO, Callable

from .. import kernels
from ..frames import BROADCAST, MAX_FRAME, AuthFailure, Malformed, airtime, decode_frame
from ..gateway import Command, CommandBridge, CommandKind, Northbound, topology_view
from ..radio import LinkTable, Outcome
from ..routing import find_cycle
from .scenario import Scenario


class InvariantViolation(RuntimeError):
    pass


def substream(seed: int, node: int, purpose: str) -> random.Random:
    """Independent RNG per (node, purpose): adding a node leaves other draws unchanged."""
    digest = hashlib.sha256(f"{seed}/{node}/{purpose}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class EventQueue:
    """Min-heap of (time, insertion sequence); cancelled entries are skipped lazily."""

    def __init__(self):
        self._heap: list[list] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, t: float, fn: Callable, args: tuple) -> list:
        entry = [t, next(self._seq), fn, args]
        heapq.heappush(self._heap, entry)
        return entry

    @staticmethod
    def cancel(entry: list) -> None:
        entry[2] = None

    def pop(self):
        heap = self._heap
        while heap:
            entry = heapq.heappop(heap)
            if entry[2] is not None:
                return entry
        return None

    def peek_time(self) -> float | None:
        heap = self._heap
        while heap and heap[0][2] is None:
            heapq.heappop(heap)
        return heap[0][0] if heap else None


class Transmission:
    __slots__ = ("uid", "src", "frame", "data", "start", "end")

    def __init__(self, uid, src, frame, data, start, end):
        self.uid = uid
        self.src = src
        self.frame = frame
        self.data = data
        self.start = start
        self.end = end


class Channel:
    """Single shared LoRa channel. Receptions are resolved when a transmission ends."""

    def __init__(self, sim: "Simulator", links: LinkTable, key: bytes, max_airtime: float):
        self.sim = sim
        self.links = links
        self.key = key
        self.max_airtime = max_airtime
        self.active: list[Transmission] = []
        self._uid = 0
        self.outcomes = {"delivered": 0, "below_sensitivity": 0, "collided": 0, "half_duplex": 0, "auth_failure": 0}
        self.transmissions = 0
        self._cs_rows = {
            a: {b for b, r in row.items() if r >= links.sensitivity} for a, row in links.static_rssi.items()
        }

    def transmit(self, src: int, frame, data: bytes, dur: float) -> None:
        sim = self.sim
        now = sim.now
        self._uid += 1
        tx = Transmission(self._uid, src, frame, data, now, now + dur)
        horizon = now - self.max_airtime
        if self.active and self.active[0].end < horizon:
            self.active = [t for t in self.active if t.end >= horizon]
        self.active.append(tx)
        self.transmissions += 1
        sim.schedule(tx.end, self._end, tx)
        if sim.trace is not None:
            sim.trace_event("tx", node=src, dst=frame.dst, kind=frame.kind.name, seq=frame.seq, dur=round(dur, 6))

    def busy_until(self, node: int, now: float) -> float:
        until = now
        for t in self.active:
            if t.end > until and t.src != node and node in self._cs_rows[t.src]:
                until = t.end
        return until

    def _end(self, tx: Transmission) -> None:
        sim = self.sim
        links = self.links
        src = tx.src
        dst = tx.frame.dst
        if dst == BROADCAST:
            receivers = links.decodable[src]
        elif dst in links.audible[src]:
            receivers = (dst,)
        else:
            return
        overlapping = [t for t in self.active if t is not tx and t.start < tx.end and t.end > tx.start]
        frame = None
        nodes = sim.nodes
        for rx in receivers:
            node = nodes.get(rx)
            if node is None or not node.alive:
                continue
            interferers = []
            half_duplex = False
            for t in overlapping:
                if t.src == rx:
                    half_duplex = True
                    break
                if rx in links.audible[t.src]:
                    interferers.append((t.src, t.uid))
            if half_duplex:
                self.outcomes["half_duplex"] += 1
                continue
            outcome, rssi = links.outcome(src, rx, tx.uid, interferers)
            if outcome is not Outcome.DELIVERED:
                self.outcomes[outcome.value] += 1
                continue
            if frame is None:
                # The ciphertext is identical for every receiver; authenticate once.
                try:
                    frame = decode_frame(tx.data, self.key)
                except (AuthFailure, Malformed):
                    self.outcomes["auth_failure"] += 1
                    return
            self.outcomes["delivered"] += 1
            node.receive(frame, rssi)


@dataclass
class Packet:
    origin: int
    seq: int
    generated_at: float
    copies: int = 1
    state: int = 0  # 0 in flight, 1 delivered, 2 lost
    hops: int = 0
    gateway: int | None = None
    delivered_at: float | None = None
    reason: str | None = None


@dataclass
class HealEvent:
    fault_t: float
    node: int
    affected: list[int]
    recovered: dict[int, float] = field(default_factory=dict)


class Simulator:
    """One deterministic run of a scenario."""

    def __init__(self, scenario: Scenario, seed: int | None = None, trace: IO[str] | None = None,
                 check_invariants: bool = True):
        from .node import Node

        sc = scenario
        self.scenario = sc
        self.seed = sc.seed if seed is None else seed
        self.duration = sc.duration_s
        self.now = 0.0
        self.queue = EventQueue()
        self.trace = trace
        self.check_invariants = check_invariants
        self.phy = sc.phy
        sens = sc.pathloss.sensitivity_dbm(sc.phy.spreading_factor, sc.phy.bandwidth)
        ids = [n.id for n in sc.nodes]
        if sc.links is not None:
            self.links = LinkTable.from_links(ids, sc.links, sens, sc.pathloss.capture_margin, self.seed)
        else:
            self.links = LinkTable.from_geometry(
                sc.building, {n.id: n.placement for n in sc.nodes}, sc.pathloss, sc.phy.tx_power, sens,
                self.seed, sc.wall_overrides,
            )
        self.max_airtime = airtime(sc.phy, MAX_FRAME) / 1000.0
        self.channel = Channel(self, self.links, sc.key, self.max_airtime)
        self.northbound = Northbound()
        self.version = 0
        self._version_bumped_at = -float("inf")
        self.version_bumps = 0
        self.nodes: dict[int, Node] = {}
        for spec in sorted(sc.nodes, key=lambda n: n.id):
            self.nodes[spec.id] = Node(self, spec)
        self.gateways = [self.nodes[g] for g in sc.gateways]
        self.bridge = CommandBridge(self.northbound, self.gateways, self._bridge_schedule)
        self.packets: dict[tuple[int, int], Packet] = {}
        self.drops: dict[str, int] = {}
        self.heal_events: list[HealEvent] = []
        self.snapshots: list[dict] = []
        self.depth_samples: dict[int, list[int]] = {i: [] for i in self.nodes}
        self.ota_started_at: float | None = None
        self.ota_image_id: int | None = None
        self.ota_staged: dict[int, float] = {}
        self.ota_activated: dict[int, float] = {}
        self.routing_events = 0
        self.acyclicity_checks = 0
        self.malformed = 0

    # -- scheduling ------------------------------------------------------------------

    def schedule(self, t: float, fn: Callable, *args) -> list:
        if t < self.now:
            raise InvariantViolation(f"event scheduled in the past: {t} < {self.now}")
        return self.queue.push(t, fn, args)

    def cancel(self, entry) -> None:
        if entry is not None:
            EventQueue.cancel(entry)

    def _bridge_schedule(self, t: float, fn: Callable, *args) -> None:
        self.schedule(max(t, self.now), fn, *args)

    def rng(self, node: int, purpose: str) -> random.Random:
        return substream(self.seed, node, purpose)

    def trace_event(self, ev: str, **fields) -> None:
        if self.trace is not None:
            fields["t"] = round(self.now, 6)
            fields["ev"] = ev
            self.trace.write(json.dumps(fields, sort_keys=True, separators=(",", ":")))
            self.trace.write("\n")

    # -- run ----------------------------------------------------------------------------

    def run(self):
        from .report import build_report

        self._start()
        q = self.queue
        end = self.duration
        while True:
            entry = q.pop()
            if entry is None:
                break
            t = entry[0]
            if t > end:
                break
            self.now = t
            entry[2](*entry[3])
        self.now = end
        self._snapshot()
        return build_report(self)

    def _start(self) -> None:
        for node in self.nodes.values():
            node.power_on(initial=True)
        for f in sorted(self.scenario.faults, key=lambda f: f.t):
            self.schedule(f.t, self.inject_fault, f.node, f.kind)
        for c in sorted(self.scenario.commands, key=lambda c: c.t):
            self.schedule(c.t, self._command, c)
        period = self.scenario.snapshot_period_s
        self.schedule(min(period, self.duration), self._periodic_snapshot)

    # -- faults and commands -----------------------------------------------------------

    def inject_fault(self, node_id: int, kind: str) -> None:
        node = self.nodes[node_id]
        self.trace_event("fault", node=node_id, kind=kind)
        if kind == "kill":
            if not node.alive:
                raise InvariantViolation(f"kill of dead node {node_id}")
            affected = self.descendants(node_id)
            self.heal_events.append(HealEvent(self.now, node_id, affected))
            node.power_off()
        else:
            if node.alive:
                raise InvariantViolation(f"revive of live node {node_id}")
            node.power_on()

    def _command(self, spec) -> None:
        kind = CommandKind(spec.kind)
        cmd = Command(kind, self.now, image_id=spec.image_id, version=spec.version, node=spec.node)
        if kind is CommandKind.OTA_START:
            cmd.image = self.scenario.image_for(spec)
            if self.ota_started_at is None:
                self.ota_started_at = self.now
                self.ota_image_id = spec.image_id
                self.ota_image = cmd.image
        topo = topology_view(self.northbound.merged) if kind is CommandKind.QUERY_TOPOLOGY else None
        self.bridge.dispatch(cmd, topology=topo)

    # -- routing helpers ----------------------------------------------------------------

    def parents(self) -> dict[int, int | None]:
        return {i: (n.state.parent if n.alive else None) for i, n in self.nodes.items()}

    def descendants(self, node_id: int) -> list[int]:
        parents = self.parents()
        out = []
        for i in parents:
            if i == node_id or not self.nodes[i].alive:
                continue
            seen = 0
            p = parents[i]
            while p is not None and seen <= len(parents):
                if p == node_id:
                    out.append(i)
                    break
                p = parents.get(p)
                seen += 1
        return sorted(out)

    def depth_of(self, node_id: int, parents=None) -> int | None:
        """Hops to a root along parent pointers, or None when detached."""
        parents = parents if parents is not None else self.parents()
        node = self.nodes[node_id]
        if node.is_gateway:
            return 0
        d = 0
        cur = node_id
        while True:
            p = parents.get(cur)
            if p is None:
                return None
            d += 1
            if self.nodes[p].is_gateway:
                return d
            cur = p
            if d > len(parents):
                return None

    def routing_event(self, node_id: int, what: str) -> None:
        """Called after every parent change or detach; checks global acyclicity."""
        self.routing_events += 1
        if self.trace is not None:
            n = self.nodes[node_id]
            self.trace_event("route", node=node_id, what=what, parent=n.state.parent, rank=n.state.rank,
                             version=n.state.version)
        if self.check_invariants:
            self.acyclicity_checks += 1
            cycle = find_cycle(self.parents())
            if cycle is not None:
                raise InvariantViolation(f"routing loop {cycle} at t={self.now:.3f} after {what} at {node_id}")
            node = self.nodes[node_id]
            st = node.state
            if st.parent is not None:
                cand = st.candidates.get(st.parent)
                if cand is not None and not st.rank > cand.rank:
                    raise InvariantViolation(f"node {node_id} rank {st.rank} not above parent rank {cand.rank}")

    def request_version_bump(self, origin: int) -> bool:
        """A root was asked for a global repair; roots share one version counter."""
        if self.now - self._version_bumped_at < self.scenario.routing.version_min_interval_s:
            return False
        self._version_bumped_at = self.now
        self.version = (self.version + 1) % 256
        self.version_bumps += 1
        self.trace_event("version", version=self.version, origin=origin)
        for gw in self.gateways:
            if gw.alive:
                gw.new_version(self.version)
        return True

    # -- packet accounting --------------------------------------------------------------

    def packet_new(self, origin: int, seq: int) -> tuple[int, int]:
        key = (origin, seq)
        if key in self.packets:
            raise InvariantViolation(f"packet id reuse {key}")
        self.packets[key] = Packet(origin, seq, self.now)
        return key

    def copy_new(self, key) -> None:
        p = self.packets.get(key)
        if p is not None:
            p.copies += 1

    def copy_end(self, key, reason: str | None = None) -> None:
        """A node stopped holding a copy: forwarded (reason None) or dropped."""
        p = self.packets.get(key)
        if p is None:
            return
        p.copies -= 1
        if reason is not None:
            self.drops[reason] = self.drops.get(reason, 0) + 1
        if p.copies <= 0 and p.state == 0:
            p.state = 2
            p.reason = reason or "unknown"

    def delivered(self, key, hops: int, gateway: int) -> None:
        p = self.packets.get(key)
        if p is None or p.state == 1:
            return
        p.state = 1
        p.hops = hops
        p.gateway = gateway
        p.delivered_at = self.now
        for ev in self.heal_events:
            if p.origin in ev.affected and p.generated_at > ev.fault_t and p.origin not in ev.recovered:
                ev.recovered[p.origin] = self.now
        self.trace_event("deliver", node=p.origin, seq=p.seq, hops=hops, gateway=gateway)

    # -- OTA bookkeeping ---------------------------------------------------------------------

    def ota_node_staged(self, node_id: int) -> None:
        self.ota_staged.setdefault(node_id, self.now)
        self.trace_event("ota_staged", node=node_id)

    def ota_node_activated(self, node_id: int) -> None:
        self.ota_activated[node_id] = self.now
        self.trace_event("ota_activated", node=node_id)

    # -- snapshots ---------------------------------------------------------------------------

    def _periodic_snapshot(self) -> None:
        self._snapshot()
        nxt = self.now + self.scenario.snapshot_period_s
        if nxt < self.duration:
            self.schedule(nxt, self._periodic_snapshot)

    def _snapshot(self) -> None:
        if self.snapshots and self.snapshots[-1]["t"] == round(self.now, 6):
            return
        parents = self.parents()
        hist: dict[str, int] = {}
        detached = 0
        for i, node in self.nodes.items():
            if node.is_gateway or not node.alive:
                continue
            d = self.depth_of(i, parents)
            if d is None:
                detached += 1
                self.depth_samples[i].append(-1)
            else:
                hist[str(d)] = hist.get(str(d), 0) + 1
                self.depth_samples[i].append(d)
        self.snapshots.append({"t": round(self.now, 6), "depth_histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
                               "detached": detached})

    def topology(self) -> list[dict]:
        parents = self.parents()
        rows = []
        for i, node in sorted(self.nodes.items()):
            st = node.state
            rows.append({
                "node": i,
                "role": "gateway" if node.is_gateway else "router",
                "alive": node.alive,
                "parent": st.parent,
                "rank": st.rank,
                "root": st.root_id if node.alive else None,
                "depth": self.depth_of(i, parents) if node.alive else None,
                "floor": node.spec.floor,
                "block": node.spec.block,
            })
        return rows


def duty_max_airtime(tx_log, window: float) -> float:
    if not tx_log:
        return 0.0
    starts = [s for s, _ in tx_log]
    ends = [e for _, e in tx_log]
    return kernels.max_window_airtime(starts, ends, window)

