"""Per-node protocol glue: routing, MAC host callbacks, application traffic and OTA."""
from __future__ import annotations

import struct
from collections import deque

from ..frames import (
    BROADCAST,
    MAX_DAO_TARGETS,
    MAX_TTL,
    AckBody,
    AppKind,
    CmdBody,
    CmdOp,
    DaoBody,
    DataBody,
    DioBody,
    EventBody,
    EventCode,
    FrameKind,
    Malformed,
    OtaDataBody,
    OtaNackBody,
    StatusBody,
)
from ..gateway import handle_uplink
from ..mac import Mac, Priority, QueueFull, TxRequest
from ..ota import OtaAgent, OtaSource, Phase
from ..routing import (
    INFINITE_RANK,
    NodeState,
    NoRoute,
    TrickleTimer,
    detach,
    live_targets,
    next_hop_down,
    parent_unreachable,
    process_dao,
    process_dio,
    reselect,
    trickle_step,
)

_LINK_DEDUPE = 8  # remembered (seq) values per neighbour for duplicate suppression


class Node:
    """A router or gateway inside a :class:`~lightmesh.sim.engine.Simulator`."""

    def __init__(self, sim, spec):
        sc = sim.scenario
        self.sim = sim
        self.spec = spec
        self.id = spec.id
        self.is_gateway = spec.role == "gateway"
        self.cfg = sc.routing
        self.max_hops = sc.max_hops
        self.alive = False
        self.rng_route = sim.rng(self.id, "routing")
        self.rng_app = sim.rng(self.id, "app")
        self.rng = sim.rng(self.id, "ota")
        self.mac = Mac(self.id, self, sim, sc.mac, sc.phy, sc.key, sim.rng(self.id, "mac"))
        self.fixed_etx = sc.routing.etx_mode == "fixed"
        self.state = self._fresh_state()
        self.fw_version = 1
        self.app_seq = 0
        self.ota = None if self.is_gateway else OtaAgent(self, sc.ota, self.id, self.fw_version)
        self.ota_source: OtaSource | None = None
        self.duty_limit = sc.mac.duty_limit
        # volatile
        self._timers: dict[str, list] = {}
        self._seen: dict[int, deque] = {}
        self._cmd_seen: set[int] = set()
        self._dio_req: TxRequest | None = None
        self._last_parent_tx = 0.0
        self._repair_at = -float("inf")
        self._boot_status = False
        self._reported_evictions = 0
        self.parent_changes = 0
        self.detaches = 0
        self.reboots = 0

    # -- state ----------------------------------------------------------------------------

    def _fresh_state(self, version=None, feasible=INFINITE_RANK) -> NodeState:
        if self.is_gateway:
            st = NodeState.root(self.id, self.sim.version)
        else:
            st = NodeState(self.id, version=version, feasible=feasible)
        st.trickle = TrickleTimer(self.cfg.imin_s, self.cfg.doublings, self.cfg.redundancy)
        return st

    @property
    def now(self) -> float:
        return self.sim.now

    @property
    def parent(self):
        st = self.state
        return st.parent if st.attached and not st.is_root else None

    def schedule(self, t, fn, *args):
        return self.sim.schedule(t, fn, *args)

    def cancel(self, ev) -> None:
        self.sim.cancel(ev)

    def _timer(self, name: str, t: float, fn, *args) -> None:
        old = self._timers.get(name)
        if old is not None:
            self.sim.cancel(old)
        self._timers[name] = self.sim.schedule(max(t, self.sim.now), fn, *args)

    def _clear_timer(self, name: str) -> None:
        old = self._timers.pop(name, None)
        if old is not None:
            self.sim.cancel(old)

    # -- power --------------------------------------------------------------------------------

    def power_on(self, initial: bool = False) -> None:
        """Cold start. DODAG version and feasibility record live in non-volatile memory."""
        st = self.state
        if initial:
            self.state = self._fresh_state()
        else:
            self.state = self._fresh_state(st.version, st.feasible)
            self.reboots += 1
        self.alive = True
        self._seen.clear()
        self._cmd_seen.clear()
        self._dio_req = None
        self._last_parent_tx = self.now
        self._boot_status = not initial
        if self.ota is not None:
            self.ota.resume()
        self._trickle_reset(force=True)
        if not self.is_gateway:
            period = self.sim.scenario.traffic.status_period_s
            start = self.sim.scenario.traffic.warmup_s + self.rng_app.uniform(0.0, period)
            self._timer("status", self.now + start, self._status_tick)
            self._timer("check", self.now + self.cfg.probe_idle_s * self.rng_route.uniform(0.5, 1.0),
                        self._periodic_check)
            for k, ep in enumerate(e for e in self.sim.scenario.endpoints if e.host_node == self.id):
                self._timer(f"ep{k}", self.now + self.rng_app.uniform(0.0, ep.extra_period_s),
                            self._endpoint_tick, k, ep.extra_period_s)
        if self.is_gateway and self.ota_source is not None:
            self.ota_source.kick()

    def power_off(self) -> None:
        self.alive = False
        for req in self.mac.reset():
            if req.packet is not None:
                self.sim.copy_end(req.packet, "power")
        for name in list(self._timers):
            self._clear_timer(name)
        if self.ota is not None:
            self.ota.power_loss()
        if self.ota_source is not None:
            self.ota_source.reset()
        if not self.is_gateway:
            was_attached = self.state.parent is not None
            self.state.parent = None
            self.state.rank = INFINITE_RANK
            if was_attached:
                self.sim.routing_event(self.id, "power_off")

    def ota_reboot(self, delay: float, version: int) -> None:
        self._timer("reboot", self.now + delay, self._reboot_down, version)

    def _reboot_down(self, version: int) -> None:
        self.power_off()
        self.sim.schedule(self.now + self.sim.scenario.ota.reboot_downtime_s, self._reboot_up, version)

    def _reboot_up(self, version: int) -> None:
        if self.alive:
            return
        self.fw_version = version
        self.ota.activated()
        self.power_on()
        self.sim.ota_node_activated(self.id)

    # -- Trickle / DIO ---------------------------------------------------------------------------

    def _trickle_arm(self) -> None:
        tr = self.state.trickle
        self._timer("trickle_fire", tr.fire_at, self._trickle_fire)
        self._timer("trickle_end", tr.ends_at, self._trickle_end)

    def _trickle_reset(self, force: bool = False) -> None:
        tr = self.state.trickle
        if force:
            tr.reset(self.now, self.rng_route)
            self._trickle_arm()
            return
        before = (tr.interval, tr.started_at)
        trickle_step(tr, "inconsistency", self.now, self.rng_route)
        if (tr.interval, tr.started_at) != before:
            self._trickle_arm()

    def _trickle_fire(self) -> None:
        self._timers.pop("trickle_fire", None)
        send = trickle_step(self.state.trickle, "fire", self.now, self.rng_route)
        if send or not self.state.attached:
            self.send_dio()

    def _trickle_end(self) -> None:
        self._timers.pop("trickle_end", None)
        trickle_step(self.state.trickle, "interval-end", self.now, self.rng_route)
        self._trickle_arm()

    def send_dio(self) -> None:
        st = self.state
        if st.version is None:
            return  # never heard a DODAG: nothing to advertise
        payload = st.dio().pack()
        st.mark_advertised()
        req = self._dio_req
        if req is not None and req.data is None and req in self.mac.queue.entries:
            req.payload = payload
            return
        self._dio_req = self._submit(TxRequest(FrameKind.DIO, payload, Priority.CONTROL, dst=BROADCAST))

    def new_version(self, version: int) -> None:
        """Root only: start a new DODAG version (global repair)."""
        st = self.state
        st.version = version
        st.feasible = st.rank
        self._trickle_reset(force=True)
        self.send_dio()

    def _on_dio(self, dio: DioBody, sender: int) -> None:
        st = self.state
        was_attached = st.attached
        old_parent = st.parent
        fixed = self.sim.links.etx.get((self.id, sender)) if self.fixed_etx else None
        res = process_dio(st, dio, sender, self.now, self.cfg, self.max_hops, fixed)
        if res.consistent:
            trickle_step(st.trickle, "consistent", self.now, self.rng_route)
        if res.reset_trickle:
            self._trickle_reset()
        if res.parent_changed or res.detached:
            self._after_route_change(old_parent, was_attached, "dio")
        if not st.is_root and not st.attached and dio.rank < INFINITE_RANK:
            self._arm_repair()

    def _after_route_change(self, old_parent, was_attached: bool, why: str) -> None:
        st = self.state
        self.parent_changes += 1
        st.failures = 0
        if st.attached:
            st.parent_heard_at = self.now
            self._last_parent_tx = self.now
            self._timer("dao", self.now + self.cfg.dao_delay_s * self.rng_route.uniform(0.5, 1.0), self._send_dao)
            self.mac.kick()
            if self._boot_status:
                self._boot_status = False
                self._status_tick(reschedule=False)
            self.sim.routing_event(self.id, why)
        else:
            self.detaches += 1
            self._clear_timer("dao")
            self.sim.routing_event(self.id, f"detach:{why}")
            # poison: advertise infinite rank right away so descendants stop using us
            self._trickle_reset(force=True)
            self.send_dio()

    def _arm_repair(self) -> None:
        """Give local repair (a feasible DIO) a chance before asking for a global one."""
        if "repair" not in self._timers:
            self._timer("repair", self.now + self.cfg.repair_delay_s, self._maybe_repair)

    def _maybe_repair(self) -> None:
        """Detached with only infeasible finite-rank neighbours: ask a root for a new version."""
        self._timers.pop("repair", None)
        st = self.state
        if st.attached or self.now - self._repair_at < self.cfg.repair_holddown_s:
            return
        options = [
            (c.rank, nid) for nid, c in st.candidates.items()
            if c.rank < INFINITE_RANK and c.parent != self.id
            and (not self.max_hops or c.depth + 1 <= self.max_hops)
        ]
        if not options:
            return
        self._repair_at = self.now
        _, via = min(options)
        self.app_seq = (self.app_seq + 1) & 0xFFFF
        body = DataBody(self.id, self.app_seq, AppKind.REPAIR, b"").pack()
        self._submit(TxRequest(FrameKind.DATA, body, Priority.CONTROL, dst=via, ttl=MAX_TTL))

    # -- DAO / liveness --------------------------------------------------------------------------------

    def _send_dao(self) -> None:
        self._timers.pop("dao", None)
        st = self.state
        if st.is_root or not st.attached:
            return
        targets = [self.id] + [t for t in live_targets(st, self.now) if t != self.id]
        body = DaoBody(st.version or 0, tuple(targets[:MAX_DAO_TARGETS]))
        self._last_parent_tx = self.now
        self._submit(TxRequest(FrameKind.DAO, body.pack(), Priority.CONTROL, dst=st.parent))
        period = self.cfg.dao_period_s
        self._timer("dao_refresh", self.now + period * self.rng_route.uniform(0.9, 1.1), self._send_dao)

    def _on_dao(self, dao: DaoBody, child: int) -> None:
        st = self.state
        if st.version is None or dao.version != st.version:
            return
        changed = process_dao(st, child, dao.targets, self.now, self.cfg.dao_lifetime_s, dao.no_path)
        if changed and not st.is_root and st.attached and "dao" not in self._timers:
            self._timer("dao", self.now + self.cfg.dao_delay_s * self.rng_route.uniform(0.5, 1.0), self._send_dao)

    def _periodic_check(self) -> None:
        st = self.state
        now = self.now
        self._timer("check", now + self.cfg.probe_idle_s, self._periodic_check)
        stale = now - 3 * self.cfg.imax_s
        for c in st.candidates.values():
            if c.heard_at < stale:
                c.rank = INFINITE_RANK
        if not st.attached:
            self._maybe_repair()
            return
        if now - max(st.parent_heard_at, 0.0) > 2 * self.cfg.imax_s:
            self._parent_lost("dio_timeout")
            return
        if now - self._last_parent_tx >= self.cfg.probe_idle_s and "dao" not in self._timers:
            self._send_dao()

    def _parent_lost(self, why: str) -> None:
        st = self.state
        old = st.parent
        changed, detached = parent_unreachable(st, self.cfg, self.max_hops)
        if changed or detached:
            self._after_route_change(old, True, why)
        if detached:
            self._arm_repair()

    # -- MAC host interface ------------------------------------------------------------------------------

    def next_hop(self, req: TxRequest):
        return self.parent

    def on_unicast_result(self, dst: int, attempts: int, acked: bool) -> None:
        st = self.state
        cand = st.candidates.get(dst)
        if cand is not None:
            sample = float(attempts) if acked else self.cfg.etx_fail_sample
            cand.update_etx(sample, self.cfg.etx_alpha, self.cfg.etx_max)
            if acked:
                cand.heard_at = self.now
        if dst != st.parent or st.is_root:
            return
        self._last_parent_tx = self.now
        if acked:
            st.failures = 0
            st.parent_heard_at = self.now
            old = st.parent
            changed, detached = reselect(st, self.cfg, self.max_hops)
            if changed or detached:
                self._after_route_change(old, True, "etx")
            elif abs(st.rank - st.advertised_rank) >= self.cfg.rank_change_threshold:
                self._trickle_reset()
            return
        st.failures += 1
        if st.failures >= self.cfg.detach_failures:
            self._parent_lost("unreachable")
        else:
            # probe again soon rather than waiting for the next uplink
            self._timer("dao", self.now + self.cfg.probe_retry_s, self._send_dao)

    def on_evicted(self, req: TxRequest) -> None:
        if req.packet is not None:
            self.sim.copy_end(req.packet, "evicted")
            req.packet = None
        if req.on_done is not None:
            req.on_done(False)

    def on_dropped(self, req: TxRequest, reason: str) -> None:
        if req.packet is not None:
            self.sim.copy_end(req.packet, reason)
            req.packet = None

    def _submit(self, req: TxRequest) -> TxRequest | None:
        if not self.alive:
            if req.packet is not None:
                self.sim.copy_end(req.packet, "power")
            return None
        try:
            self.mac.submit(req)
        except QueueFull:
            if req.packet is not None:
                self.sim.copy_end(req.packet, "queue_full")
            if req.on_done is not None:
                self.sim.schedule(self.now + 1.0, req.on_done, False)
            return None
        return req

    # -- application uplinks ---------------------------------------------------------------------------------

    def _uplink(self, app: AppKind, body: bytes) -> None:
        self.app_seq = (self.app_seq + 1) & 0xFFFF
        key = self.sim.packet_new(self.id, self.app_seq) if not _wraps(self.sim, self.id, self.app_seq) else None
        payload = DataBody(self.id, self.app_seq, app, body).pack()
        req = TxRequest(FrameKind.DATA, payload, Priority.DATA, dst=None, ttl=MAX_TTL, packet=key)
        req.on_done = _data_done(self.sim, req)
        self._submit(req)

    def _status_tick(self, reschedule: bool = True) -> None:
        st = self.state
        if reschedule:
            self._timer("status", self.now + self.sim.scenario.traffic.status_period_s, self._status_tick)
        pct = self.ota.session.percent() if self.ota is not None and self.ota.session is not None else 0
        body = StatusBody(self.fw_version, st.rank, st.parent if st.parent is not None else BROADCAST, pct,
                          self.mac.evictions)
        self._uplink(AppKind.STATUS, body.pack())
        if self.mac.evictions > self._reported_evictions:
            self._reported_evictions = self.mac.evictions
            self._uplink(AppKind.EVENT, EventBody(EventCode.EVICTION, self.mac.evictions).pack())

    def _endpoint_tick(self, k: int, period: float) -> None:
        self._timer(f"ep{k}", self.now + period, self._endpoint_tick, k, period)
        self._uplink(AppKind.ATTACHED, struct.pack(">H", k))

    # -- reception --------------------------------------------------------------------------------------------

    def receive(self, frame, rssi: float) -> None:
        kind = frame.kind
        src = frame.src
        if frame.dst == self.id:
            if kind is FrameKind.ACK:
                try:
                    self.mac.on_ack(src, AckBody.unpack(frame.payload).acked_seq)
                except Malformed:
                    self.sim.malformed += 1
                return
            self.mac.send_ack(src, frame.seq)
            seen = self._seen.get(src)
            if seen is None:
                seen = self._seen[src] = deque(maxlen=_LINK_DEDUPE)
            elif frame.seq in seen:
                return  # retransmission whose ACK was lost
            seen.append(frame.seq)
        elif frame.dst != BROADCAST:
            return
        try:
            if kind is FrameKind.DIO:
                self._on_dio(DioBody.unpack(frame.payload), src)
            elif kind is FrameKind.DAO:
                if frame.dst == self.id:
                    self._on_dao(DaoBody.unpack(frame.payload), src)
            elif kind is FrameKind.DATA:
                if frame.dst == self.id:
                    self._on_data(frame)
            elif kind is FrameKind.OTA_DATA:
                self._on_ota_data(OtaDataBody.unpack(frame.payload), src, frame.dst == BROADCAST)
            elif kind is FrameKind.OTA_NACK:
                if frame.dst == self.id:
                    self._on_ota_nack(OtaNackBody.unpack(frame.payload), src)
            elif kind is FrameKind.CMD:
                self._on_cmd(frame)
        except Malformed:
            self.sim.malformed += 1

    def _on_data(self, frame) -> None:
        body = DataBody.unpack(frame.payload)
        key = (body.origin, body.origin_seq)
        tracked = key in self.sim.packets and body.app is not AppKind.REPAIR
        if self.state.is_root:
            if body.app is AppKind.REPAIR:
                self.sim.request_version_bump(body.origin)
                return
            try:
                rec = handle_uplink(self.id, self.now, frame)
            except Malformed:
                self.sim.northbound.malformed += 1
                return
            if rec is not None:
                self.sim.northbound.publish(rec)
            if tracked:
                self.sim.delivered(key, MAX_TTL - frame.ttl + 1, self.id)
            return
        if frame.ttl == 0:
            if tracked:
                self.sim.copy_new(key)
                self.sim.copy_end(key, "ttl")
            return
        prio = Priority.CONTROL if body.app is AppKind.REPAIR else Priority.DATA
        req = TxRequest(FrameKind.DATA, frame.payload, prio, dst=None, ttl=frame.ttl - 1,
                        packet=key if tracked else None)
        if tracked:
            self.sim.copy_new(key)
            req.on_done = _data_done(self.sim, req)
        self._submit(req)

    def _on_cmd(self, frame) -> None:
        cmd = CmdBody.unpack(frame.payload)
        if cmd.target == BROADCAST:
            if cmd.cmd_seq in self._cmd_seen:
                return
            self._cmd_seen.add(cmd.cmd_seq)
            if frame.ttl > 0 and not self.is_gateway:
                self._submit(TxRequest(FrameKind.CMD, frame.payload, Priority.CONTROL, dst=BROADCAST,
                                       ttl=frame.ttl - 1))
            self._execute(cmd)
            return
        if frame.dst != self.id:
            return
        if cmd.target == self.id:
            self._execute(cmd)
            return
        try:
            self._route_down(cmd, frame.ttl)
        except NoRoute:
            pass  # reported northbound by _route_down

    def _route_down(self, cmd: CmdBody, ttl: int) -> None:
        try:
            hop = next_hop_down(self.state, cmd.target, self.now)
        except NoRoute:
            if not self.is_gateway:
                self._uplink(AppKind.EVENT, EventBody(EventCode.ROUTE_LOSS, cmd.target).pack())
            raise
        if ttl <= 0:
            return
        self._submit(TxRequest(FrameKind.CMD, cmd.pack(), Priority.CONTROL, dst=hop, ttl=ttl - 1))

    def _execute(self, cmd: CmdBody) -> None:
        if self.is_gateway:
            return
        if cmd.op is CmdOp.PING:
            self._uplink(AppKind.PONG, struct.pack(">H", cmd.cmd_seq))
        elif cmd.op is CmdOp.OTA_ACTIVATE:
            self.ota.activate(cmd.arg)

    def _on_ota_data(self, body: OtaDataBody, sender: int, broadcast: bool) -> None:
        if self.ota is not None:
            self.ota.on_data(body, sender, broadcast)

    def _on_ota_nack(self, body: OtaNackBody, child: int) -> None:
        if self.ota_source is not None:
            self.ota_source.on_nack(body, child)
        elif self.ota is not None:
            self.ota.on_nack(body, child)

    # -- OTA host interface ------------------------------------------------------------------------------------

    def send_ota(self, kind, payload, dst, on_done, still_wanted) -> None:
        req = TxRequest(kind, payload, Priority.OTA, dst=dst, on_done=on_done, still_wanted=still_wanted)
        if not self.alive:
            return
        self._submit(req)

    def ota_wait(self, frame_len: int) -> float:
        dur = self.mac.airtime_s(frame_len)
        t = self.mac.ota_earliest(self.now, dur)
        return max(0.0, t - self.now)

    def ota_airtime(self, frame_len: int) -> float:
        return self.mac.airtime_s(frame_len)

    def ota_event(self, name: str, **fields) -> None:
        if name == "ota_progress":
            self._uplink(AppKind.EVENT, EventBody(EventCode.OTA_PROGRESS, fields["image_id"], fields["percent"]).pack())
        elif name == "ota_staged":
            self.sim.ota_node_staged(self.id)
            self._uplink(AppKind.EVENT, EventBody(EventCode.OTA_STAGED, fields["image_id"], fields["version"]).pack())
        elif name == "fault":
            code = EventCode.DIGEST_MISMATCH if fields["reason"] == "digest_mismatch" else EventCode.NOT_STAGED
            self._uplink(AppKind.EVENT, EventBody(code, fields.get("image_id", 0)).pack())

    # -- gateway port ------------------------------------------------------------------------------------------

    def start_ota(self, image: bytes, image_id: int, version: int, stripe: tuple[int, int] = (0, 1)) -> None:
        self.ota_source = OtaSource(self, self.sim.scenario.ota, image, image_id, version, stripe)
        if self.alive:
            self.ota_source.kick()

    def flood_command(self, op: CmdOp, arg: int, cmd_seq: int) -> None:
        self._cmd_seen.add(cmd_seq)
        body = CmdBody(BROADCAST, cmd_seq, op, arg)
        self._submit(TxRequest(FrameKind.CMD, body.pack(), Priority.CONTROL, dst=BROADCAST, ttl=MAX_TTL))

    def route_command(self, target: int, op: CmdOp, arg: int, cmd_seq: int) -> None:
        self._route_down(CmdBody(target, cmd_seq, op, arg), MAX_TTL + 1)

    def has_route(self, node: int) -> bool:
        if not self.alive:
            return False
        entry = self.state.downward.get(node)
        return entry is not None and entry[1] > self.now


def _wraps(sim, origin: int, seq: int) -> bool:
    """True when a 16-bit sequence number wrapped onto a still-tracked packet."""
    return (origin, seq) in sim.packets


def _data_done(sim, req: TxRequest):
    def done(ok: bool) -> None:
        key = req.packet
        if key is None:
            return
        req.packet = None
        sim.copy_end(key, None if ok else "link")
    return done
