"""Indoor propagation, link budgets and reception outcomes.

Static terms (distance, walls, floors, per-link shadowing) are computed once
per scenario into a :class:`LinkTable`. Per-packet variation is a keyed hash
draw, so an outcome depends only on (seed, link, transmission id).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from . import kernels

DEFAULT_SENSITIVITY = {7: -124.0, 8: -127.0, 9: -130.0, 10: -133.0, 11: -135.0, 12: -137.0}

# Box-Muller over 53-bit uniforms never exceeds ~8.6 sigma.
_MAX_SIGMAS = 9.0

_SHADOW_PURPOSE = 0x5AD0
_PACKET_PURPOSE = 0x9AC7
_FADE_PURPOSE = 0xFADE


@dataclass(frozen=True)
class Placement:
    x: float
    y: float
    floor: int
    block: str = ""


@dataclass
class BuildingGeometry:
    dimensions: tuple[float, float, float] = (50.0, 50.0, 30.0)
    floor_count: int = 1
    lowest_floor: int = 0
    floor_height: float = 3.0
    blocks: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)

    @property
    def highest_floor(self) -> int:
        return self.lowest_floor + self.floor_count - 1

    def check(self, p: Placement) -> str | None:
        """Return a problem description, or None if ``p`` fits the building."""
        xmax, ymax, zmax = self.dimensions
        if not (0 <= p.x <= xmax and 0 <= p.y <= ymax):
            return f"position ({p.x}, {p.y}) outside {xmax} x {ymax} footprint"
        if not self.lowest_floor <= p.floor <= self.highest_floor:
            return f"floor {p.floor} outside {self.lowest_floor}..{self.highest_floor}"
        if p.floor * self.floor_height > zmax:
            return f"floor {p.floor} above building height {zmax}"
        if self.blocks and p.block not in self.blocks:
            return f"unknown block {p.block!r}"
        return None


@dataclass
class PathLossModel:
    pl0: float = 40.0
    exponent: float = 3.0
    wall_db: float = 5.0
    floor_db: float = 15.0
    wall_spacing: float = 10.0
    shadow_sigma: float = 4.0
    packet_sigma: float = 2.0
    capture_margin: float = 6.0
    d0: float = 1.0
    sensitivity: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_SENSITIVITY))

    def __post_init__(self):
        self.sensitivity = {int(k): float(v) for k, v in self.sensitivity.items()}
        for name in ("wall_db", "floor_db", "shadow_sigma", "packet_sigma", "capture_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.wall_db < self.floor_db:
            raise ValueError("wall_db must be smaller than floor_db")
        if self.wall_spacing <= 0 or self.d0 <= 0:
            raise ValueError("wall_spacing and d0 must be positive")
        sfs = sorted(self.sensitivity)
        for lo, hi in zip(sfs, sfs[1:]):
            if not self.sensitivity[hi] < self.sensitivity[lo]:
                raise ValueError("sensitivity must strictly decrease with spreading factor")

    def sensitivity_dbm(self, sf: int, bandwidth: int = 125_000) -> float:
        # table is for 125 kHz; wider channels admit proportionally more noise
        return self.sensitivity[sf] + 10.0 * math.log10(bandwidth / 125_000)


def walls_between(a: Placement, b: Placement, model: PathLossModel) -> int:
    horiz = math.hypot(a.x - b.x, a.y - b.y)
    return int(math.floor(horiz / model.wall_spacing)) + (2 if a.block != b.block else 0)


def path_loss(
    geom: BuildingGeometry,
    a: Placement,
    b: Placement,
    model: PathLossModel,
    walls: int | None = None,
) -> float:
    """Static loss in dB; ``walls`` overrides the spacing heuristic."""
    horiz = math.hypot(a.x - b.x, a.y - b.y)
    nf = abs(a.floor - b.floor)
    if walls is None:
        walls = walls_between(a, b, model)
    return kernels.path_loss_db(
        horiz, nf * geom.floor_height, nf, walls,
        model.pl0, model.exponent, model.wall_db, model.floor_db, model.d0,
    )


class Outcome(Enum):
    DELIVERED = "delivered"
    BELOW_SENSITIVITY = "below_sensitivity"
    COLLIDED = "collided"


def decide(rssi: float, interferers: list[float], sensitivity: float, capture_margin: float) -> Outcome:
    if rssi < sensitivity:
        return Outcome.BELOW_SENSITIVITY
    if interferers and rssi - max(interferers) < capture_margin:
        return Outcome.COLLIDED
    return Outcome.DELIVERED


class LinkTable:
    """Static per-link received power plus deterministic per-packet variation.

    ``static_rssi[a][b]`` is tx_power - path_loss - shadow. Links weaker than
    the prune margin below sensitivity are absent from ``neighbors``.
    """

    def __init__(
        self,
        ids: list[int],
        static_rssi: dict[int, dict[int, float]],
        sensitivity: float,
        capture_margin: float,
        packet_sigma: float,
        seed: int,
        prr: dict[tuple[int, int], float] | None = None,
        etx: dict[tuple[int, int], float] | None = None,
        prune_margin: float = 40.0,
    ):
        self.ids = list(ids)
        self.static_rssi = static_rssi
        self.sensitivity = sensitivity
        self.capture_margin = capture_margin
        self.packet_sigma = packet_sigma
        self.seed = seed
        self.prr = prr or {}
        self.etx = etx or {}
        floor = sensitivity - prune_margin
        self.neighbors: dict[int, list[int]] = {
            a: sorted(b for b, r in row.items() if b != a and r >= floor) for a, row in static_rssi.items()
        }
        # receivers that can ever decode: packet noise is bounded by _MAX_SIGMAS
        reach = sensitivity - _MAX_SIGMAS * packet_sigma
        self.decodable: dict[int, list[int]] = {
            a: [b for b in nb if static_rssi[a][b] >= reach] for a, nb in self.neighbors.items()
        }
        self.audible: dict[int, set[int]] = {a: set(nb) for a, nb in self.neighbors.items()}

    @classmethod
    def from_geometry(
        cls,
        geom: BuildingGeometry,
        placements: dict[int, Placement],
        model: PathLossModel,
        tx_power: float,
        sensitivity: float,
        seed: int,
        wall_overrides: dict[frozenset, int] | None = None,
    ) -> "LinkTable":
        ids = sorted(placements)
        xs = [placements[i].x for i in ids]
        ys = [placements[i].y for i in ids]
        fl = [placements[i].floor for i in ids]
        bl = [placements[i].block for i in ids]
        flat = kernels.path_loss_matrix(
            xs, ys, fl, bl, geom.floor_height, model.wall_spacing,
            model.pl0, model.exponent, model.wall_db, model.floor_db, model.d0,
        )
        n = len(ids)
        rssi: dict[int, dict[int, float]] = {i: {} for i in ids}
        for ia, a in enumerate(ids):
            for ib in range(ia + 1, n):
                b = ids[ib]
                key = frozenset((a, b))
                if wall_overrides and key in wall_overrides:
                    loss = path_loss(geom, placements[a], placements[b], model, walls=wall_overrides[key])
                else:
                    loss = flat[ia * n + ib]
                loss += shadowing(seed, a, b, model.shadow_sigma)
                rssi[a][b] = rssi[b][a] = tx_power - loss
        return cls(ids, rssi, sensitivity, model.capture_margin, model.packet_sigma, seed)

    @classmethod
    def from_links(
        cls,
        ids: list[int],
        links: list[dict],
        sensitivity: float,
        capture_margin: float,
        seed: int,
        default_rssi: float = -80.0,
    ) -> "LinkTable":
        """Explicit graph: each link carries a delivery probability and optional fixed ETX."""
        rssi: dict[int, dict[int, float]] = {i: {} for i in ids}
        prr: dict[tuple[int, int], float] = {}
        etx: dict[tuple[int, int], float] = {}
        for link in links:
            a, b = link["a"], link["b"]
            r = float(link.get("rssi", default_rssi))
            rssi[a][b] = rssi[b][a] = r
            p = float(link.get("prr", 1.0))
            prr[(a, b)] = prr[(b, a)] = p
            if link.get("etx") is not None:
                etx[(a, b)] = etx[(b, a)] = float(link["etx"])
        return cls(ids, rssi, sensitivity, capture_margin, 0.0, seed, prr=prr, etx=etx)

    def mean_rssi(self, a: int, b: int) -> float:
        return self.static_rssi[a].get(b, -math.inf)

    def rssi(self, a: int, b: int, uid: int) -> float:
        r = self.static_rssi[a].get(b, -math.inf)
        if self.packet_sigma:
            r -= self.packet_sigma * kernels.hash_normal(self.seed ^ _PACKET_PURPOSE, a, b, uid)
        return r

    def outcome(self, a: int, b: int, uid: int, interferers: list[tuple[int, int]]) -> tuple[Outcome, float]:
        """Reception of transmission ``uid`` from a at b, given overlapping (src, uid) pairs."""
        r = self.rssi(a, b, uid)
        others = [self.rssi(src, b, iuid) for src, iuid in interferers]
        result = decide(r, others, self.sensitivity, self.capture_margin)
        if result is Outcome.DELIVERED and self.prr:
            p = self.prr.get((a, b), 1.0)
            if p < 1.0 and kernels.hash_uniform(self.seed ^ _FADE_PURPOSE, a, b, uid) >= p:
                result = Outcome.BELOW_SENSITIVITY
        return result, r


def shadowing(seed: int, a: int, b: int, sigma: float) -> float:
    """Static log-normal shadowing in dB, symmetric in (a, b)."""
    if not sigma:
        return 0.0
    lo, hi = (a, b) if a < b else (b, a)
    return sigma * kernels.hash_normal(seed ^ _SHADOW_PURPOSE, lo, hi, 0)


def receive_outcome(
    links: LinkTable,
    src: int,
    receiver: int,
    uid: int,
    concurrent: list[tuple[int, int]],
) -> Outcome:
    """Outcome at ``receiver`` of transmission ``uid`` sent by ``src``.

    ``concurrent`` lists (src, uid) of every transmission overlapping it.
    """
    return links.outcome(src, receiver, uid, concurrent)[0]
