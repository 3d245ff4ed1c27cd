"""RPL-style DODAG maintenance: ranks, parent selection, Trickle and DAO routes.

All functions here operate on plain state objects and never touch the radio;
the simulator node turns their results into frames.

Loop freedom uses a feasibility condition: each node remembers the lowest
rank it has advertised in the current DODAG version (``feasible``) and may
only adopt a new parent whose advertised rank is strictly below it. Nodes
that run out of feasible parents detach and poison; a new version (issued
by the roots) resets every node's feasibility record.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .frames import BROADCAST, DioBody

ROOT_RANK = 256
MIN_HOP_RANK_INCREASE = 256
INFINITE_RANK = 0xFFFF


class NoRoute(LookupError):
    def __init__(self, dest: int):
        super().__init__(f"no downward route to node {dest}")
        self.dest = dest


@dataclass
class RoutingConfig:
    imin_s: float = 16.0
    doublings: int = 8
    redundancy: int = 2
    hysteresis: int = 384
    etx_alpha: float = 0.2
    etx_init: float = 2.0
    etx_fail_sample: float = 8.0
    etx_max: float = 16.0
    etx_mode: str = "estimated"  # or "fixed"
    rank_change_threshold: int = 128
    dao_period_s: float = 900.0
    dao_lifetime_s: float = 2700.0
    dao_delay_s: float = 5.0
    probe_idle_s: float = 300.0
    probe_retry_s: float = 30.0
    detach_failures: int = 3
    repair_holddown_s: float = 60.0
    repair_delay_s: float = 120.0
    version_min_interval_s: float = 120.0

    @property
    def imax_s(self) -> float:
        return self.imin_s * 2 ** self.doublings


def version_newer(a: int, b: int) -> bool:
    """True when 8-bit version ``a`` is newer than ``b`` (serial arithmetic)."""
    return 0 < (a - b) % 256 < 128


def compute_rank(parent_rank: int, etx: float) -> int:
    if etx < 1.0:
        raise ValueError(f"etx must be >= 1.0, got {etx}")
    if parent_rank >= INFINITE_RANK:
        return INFINITE_RANK
    return min(INFINITE_RANK, parent_rank + int(etx * MIN_HOP_RANK_INCREASE + 0.5))


# --- Trickle -----------------------------------------------------------------


@dataclass
class TrickleTimer:
    imin: float = 16.0
    doublings: int = 8
    k: int = 2
    interval: float = 16.0
    t: float = 8.0
    c: int = 0
    started_at: float = 0.0

    @property
    def imax(self) -> float:
        return self.imin * 2 ** self.doublings

    @property
    def fire_at(self) -> float:
        return self.started_at + self.t

    @property
    def ends_at(self) -> float:
        return self.started_at + self.interval

    def _begin(self, now: float, rng) -> None:
        self.started_at = now
        self.t = rng.uniform(self.interval / 2, self.interval)
        self.c = 0

    def reset(self, now: float, rng) -> None:
        self.interval = self.imin
        self._begin(now, rng)

    def double(self, now: float, rng) -> None:
        self.interval = min(self.interval * 2, self.imax)
        self._begin(now, rng)


def trickle_step(timer: TrickleTimer, event: str, now: float, rng) -> bool:
    """Advance ``timer``; returns True when a DIO should be sent now.

    Events: ``"interval-end"``, ``"consistent"``, ``"inconsistency"`` and
    ``"fire"`` (the randomized point t inside the interval).
    """
    if event == "interval-end":
        timer.double(now, rng)
    elif event == "consistent":
        timer.c += 1
    elif event == "inconsistency":
        if timer.interval > timer.imin or now >= timer.fire_at:
            timer.reset(now, rng)
    elif event == "fire":
        return timer.c < timer.k
    else:
        raise ValueError(f"unknown trickle event {event!r}")
    return False


# --- node state --------------------------------------------------------------


@dataclass
class Candidate:
    rank: int = INFINITE_RANK
    root_id: int = 0
    depth: int = 0
    parent: int = BROADCAST
    etx: float = 2.0
    heard_at: float = -math.inf
    fixed: bool = False

    def update_etx(self, sample: float, alpha: float, cap: float) -> None:
        if not self.fixed:
            self.etx = min(cap, max(1.0, (1 - alpha) * self.etx + alpha * sample))


@dataclass
class NodeState:
    node_id: int
    is_root: bool = False
    rank: int = INFINITE_RANK
    parent: int | None = None
    depth: int = 0
    root_id: int | None = None
    version: int | None = None
    feasible: int = INFINITE_RANK
    advertised_rank: int = INFINITE_RANK
    candidates: dict[int, Candidate] = field(default_factory=dict)
    downward: dict[int, tuple[int, float]] = field(default_factory=dict)
    trickle: TrickleTimer = field(default_factory=TrickleTimer)
    parent_heard_at: float = 0.0
    failures: int = 0

    @classmethod
    def root(cls, node_id: int, version: int = 0) -> "NodeState":
        return cls(node_id, True, ROOT_RANK, None, 0, node_id, version, ROOT_RANK, ROOT_RANK)

    @property
    def attached(self) -> bool:
        return self.is_root or (self.parent is not None and self.rank < INFINITE_RANK)

    def dio(self) -> DioBody:
        return DioBody(
            root_id=self.root_id if self.root_id is not None else 0,
            version=self.version or 0,
            rank=self.rank,
            depth=min(self.depth, 255),
            parent=self.parent if self.parent is not None else BROADCAST,
        )

    def mark_advertised(self) -> None:
        self.advertised_rank = self.rank
        if self.rank < self.feasible:
            self.feasible = self.rank


@dataclass
class DioResult:
    parent_changed: bool = False
    detached: bool = False
    reset_trickle: bool = False
    consistent: bool = False
    stale: bool = False


def _path_rank(c: Candidate) -> int:
    return compute_rank(c.rank, c.etx)


def select_parent(
    candidates: dict[int, Candidate],
    current_parent: int | None,
    *,
    hysteresis: int = 384,
    feasible: int = INFINITE_RANK,
    max_hops: int = 0,
    self_id: int | None = None,
) -> int | None:
    """Best parent by resulting rank, with switching hysteresis.

    Ties go to the lower advertised rank, then the lower root id, then the
    lower node id. A new parent must advertise a rank below ``feasible``.
    """
    eligible = {}
    for nid, c in candidates.items():
        if c.rank >= INFINITE_RANK or (self_id is not None and c.parent == self_id):
            continue
        if max_hops and c.depth + 1 > max_hops:
            continue
        if nid != current_parent and c.rank >= feasible:
            continue
        r = _path_rank(c)
        if r < INFINITE_RANK:
            eligible[nid] = r
    if not eligible:
        return None
    best = min(eligible, key=lambda n: (eligible[n], candidates[n].rank, candidates[n].root_id, n))
    if current_parent in eligible and best != current_parent:
        if eligible[current_parent] - eligible[best] < hysteresis:
            return current_parent
    return best


def reselect(state: NodeState, cfg: RoutingConfig, max_hops: int = 0) -> tuple[bool, bool]:
    """Re-run parent selection. Returns (parent_changed, detached)."""
    if state.is_root:
        return False, False
    hyst = cfg.hysteresis
    new = select_parent(
        state.candidates, state.parent, hysteresis=hyst, feasible=state.feasible,
        max_hops=max_hops, self_id=state.node_id,
    )
    old = state.parent
    if new is None:
        was_attached = old is not None
        state.parent = None
        state.rank = INFINITE_RANK
        state.root_id = None
        state.depth = 0xFF
        return was_attached, was_attached
    c = state.candidates[new]
    state.parent = new
    state.rank = _path_rank(c)
    state.depth = c.depth + 1
    state.root_id = c.root_id
    return new != old, False


def _adopt_version(state: NodeState, version: int) -> None:
    state.version = version
    state.feasible = INFINITE_RANK
    for c in state.candidates.values():
        c.rank = INFINITE_RANK
    state.parent = None
    state.rank = INFINITE_RANK
    state.depth = 0xFF
    state.root_id = None


def new_candidate(cfg: RoutingConfig, fixed_etx: float | None = None) -> Candidate:
    if fixed_etx is not None:
        return Candidate(etx=fixed_etx, fixed=True)
    return Candidate(etx=cfg.etx_init)


def process_dio(
    state: NodeState,
    dio: DioBody,
    sender: int,
    now: float,
    cfg: RoutingConfig,
    max_hops: int = 0,
    fixed_etx: float | None = None,
) -> DioResult:
    res = DioResult()
    if state.is_root:
        if state.version is not None and version_newer(state.version, dio.version):
            res.reset_trickle = True
        elif dio.rank < INFINITE_RANK:
            res.consistent = True
        else:
            res.reset_trickle = True
        return res
    if state.version is not None and version_newer(state.version, dio.version):
        res.stale = res.reset_trickle = True
        return res
    if state.version is None or version_newer(dio.version, state.version):
        had_parent = state.parent is not None
        _adopt_version(state, dio.version)
        res.reset_trickle = True
        res.parent_changed = had_parent

    cand = state.candidates.get(sender)
    if cand is None:
        cand = state.candidates[sender] = new_candidate(cfg, fixed_etx)
        prev_rank = None
    else:
        prev_rank = cand.rank
    cand.rank = dio.rank
    cand.root_id = dio.root_id
    cand.depth = dio.depth
    cand.parent = dio.parent
    cand.heard_at = now
    if sender == state.parent:
        state.parent_heard_at = now
    if dio.parent != state.node_id:
        purge_next_hop(state, sender)

    if dio.rank >= INFINITE_RANK and prev_rank != INFINITE_RANK:
        res.reset_trickle = True

    changed, detached = reselect(state, cfg, max_hops)
    res.parent_changed |= changed
    res.detached = detached
    if changed or detached:
        res.reset_trickle = True
    elif abs(state.rank - state.advertised_rank) >= cfg.rank_change_threshold:
        res.reset_trickle = True
    if not res.reset_trickle and dio.rank < INFINITE_RANK:
        if prev_rank is not None and abs(dio.rank - prev_rank) < cfg.rank_change_threshold:
            res.consistent = True
    return res


def detach(state: NodeState, cfg: RoutingConfig) -> None:
    """Leave the DODAG: infinite rank, no parent, candidates need fresh DIOs."""
    state.parent = None
    state.rank = INFINITE_RANK
    state.root_id = None
    state.depth = 0xFF
    state.failures = 0
    for c in state.candidates.values():
        c.rank = INFINITE_RANK
        if not c.fixed:
            c.etx = (c.etx + cfg.etx_init) / 2


def parent_unreachable(state: NodeState, cfg: RoutingConfig, max_hops: int = 0) -> tuple[bool, bool]:
    """The current parent stopped answering; pick another feasible one or detach."""
    if state.parent is None:
        return False, False
    cand = state.candidates.get(state.parent)
    if cand is not None:
        cand.rank = INFINITE_RANK
    state.failures = 0
    changed, detached = reselect(state, cfg, max_hops)
    if detached:
        detach(state, cfg)
    return changed, detached


# --- downward routes ------------------------------------------------------------


def process_dao(state: NodeState, child: int, targets, now: float, lifetime: float, no_path: bool = False) -> bool:
    """Install (or withdraw) downward routes learned from ``child``. True if the table changed."""
    changed = False
    if no_path:
        for t in targets:
            entry = state.downward.get(t)
            if entry is not None and entry[0] == child:
                del state.downward[t]
                changed = True
        return changed
    expiry = now + lifetime
    for t in targets:
        if t == state.node_id:
            continue
        prev = state.downward.get(t)
        if prev is None or prev[0] != child:
            changed = True
        state.downward[t] = (child, expiry)
    return changed


def next_hop_down(state: NodeState, dest: int, now: float) -> int:
    entry = state.downward.get(dest)
    if entry is None:
        raise NoRoute(dest)
    hop, expiry = entry
    if expiry <= now:
        del state.downward[dest]
        raise NoRoute(dest)
    return hop


def purge_next_hop(state: NodeState, neighbor: int) -> None:
    """Drop routes through ``neighbor``; it no longer lists us as its parent."""
    stale = [d for d, (hop, _) in state.downward.items() if hop == neighbor]
    for d in stale:
        del state.downward[d]


def live_targets(state: NodeState, now: float) -> list[int]:
    return sorted(d for d, (_, exp) in state.downward.items() if exp > now)


# --- global checks ----------------------------------------------------------------


def find_cycle(parents: dict[int, int | None]) -> list[int] | None:
    """Return the nodes of a parent-pointer cycle, or None if the graph is a forest."""
    done: set[int] = set()
    for start in parents:
        on_path: dict[int, int] = {}
        path: list[int] = []
        node = start
        while node is not None and node not in done:
            if node in on_path:
                return path[on_path[node]:]
            on_path[node] = len(path)
            path.append(node)
            node = parents.get(node)
        done.update(path)
    return None


def is_acyclic(parents: dict[int, int | None]) -> bool:
    return find_cycle(parents) is None
