"""Scenario files: YAML key tree -> validated :class:`Scenario`.

Unknown keys are rejected. Every error names the offending key path and,
when the text came from a file, its line number.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..frames import PhyParams
from ..mac import MacConfig
from ..ota import MAX_CHUNK, MIN_CHUNK, OtaConfig
from ..radio import BuildingGeometry, PathLossModel, Placement
from ..routing import RoutingConfig

DEFAULT_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")


class ScenarioError(ValueError):
    """InvalidScenario: carries the key path and source line of the problem."""

    def __init__(self, path: str, message: str, line: int | None = None):
        where = f"{path}" + (f" (line {line})" if line is not None else "")
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.message = message


class InvalidFault(ScenarioError):
    pass


# --- YAML with line numbers ----------------------------------------------------------


class _LineDict(dict):
    lines: dict


class _LineList(list):
    lines: list


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _LineDict()
    out.lines = {}
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ScenarioError(str(key), "duplicate key", key_node.start_mark.line + 1)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


def _construct_sequence(loader, node):
    out = _LineList(loader.construct_object(child, deep=True) for child in node.value)
    out.lines = [child.start_mark.line + 1 for child in node.value]
    out.line = node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_sequence)


def _line(container, key) -> int | None:
    lines = getattr(container, "lines", None)
    if lines is None:
        return getattr(container, "line", None)
    try:
        return lines[key]
    except (KeyError, IndexError, TypeError):
        return getattr(container, "line", None)


# --- model -------------------------------------------------------------------------------


@dataclass
class NodeSpec:
    id: int
    x: float
    y: float
    floor: int
    block: str = ""
    role: str = "router"

    @property
    def placement(self) -> Placement:
        return Placement(self.x, self.y, self.floor, self.block)


@dataclass
class FaultSpec:
    t: float
    node: int
    kind: str


@dataclass
class EndpointSpec:
    host_node: int
    extra_period_s: float


@dataclass
class CommandSpec:
    t: float
    kind: str
    image_bytes: int | None = None
    image_file: str | None = None
    image_id: int = 1
    version: int = 2
    node: int | None = None


@dataclass
class TrafficConfig:
    status_period_s: float = 300.0
    warmup_s: float = 0.0


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 1
    duration_s: float = 86400.0
    max_hops: int = 0
    key: bytes = DEFAULT_KEY
    building: BuildingGeometry = field(default_factory=BuildingGeometry)
    phy: PhyParams = field(default_factory=PhyParams)
    pathloss: PathLossModel = field(default_factory=PathLossModel)
    wall_overrides: dict[frozenset, int] = field(default_factory=dict)
    links: list[dict] | None = None
    mac: MacConfig = field(default_factory=MacConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    ota: OtaConfig = field(default_factory=OtaConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    nodes: list[NodeSpec] = field(default_factory=list)
    endpoints: list[EndpointSpec] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    commands: list[CommandSpec] = field(default_factory=list)
    snapshot_period_s: float = 21600.0
    base_dir: Path | None = None

    @property
    def gateways(self) -> list[int]:
        return sorted(n.id for n in self.nodes if n.role == "gateway")

    @property
    def routers(self) -> list[int]:
        return sorted(n.id for n in self.nodes if n.role == "router")

    def node(self, nid: int) -> NodeSpec:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def image_for(self, cmd: CommandSpec) -> bytes:
        """Bytes of an ota_start image: a file, or deterministic pseudo-random content."""
        if cmd.image_file is not None:
            p = Path(cmd.image_file)
            if not p.is_absolute() and self.base_dir is not None:
                p = self.base_dir / p
            return p.read_bytes()
        digest = hashlib.sha256(f"{self.seed}/image/{cmd.image_id}".encode()).digest()
        return random.Random(digest).randbytes(cmd.image_bytes)

    def validate(self) -> None:
        validate(self)

    def replace(self, **changes) -> "Scenario":
        s = dataclasses.replace(self, **changes)
        validate(s)
        return s


# --- parsing -------------------------------------------------------------------------------


def _check_keys(obj, allowed: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise ScenarioError(path, f"expected a mapping, got {type(obj).__name__}", getattr(obj, "line", None))
    for key in obj:
        if key not in allowed:
            raise ScenarioError(f"{path}.{key}" if path else str(key), "unknown field", _line(obj, key))


def _num(obj, key, path, kind=float, default=None, lo=None, hi=None, required=False):
    p = f"{path}.{key}" if path else key
    if key not in obj:
        if required:
            raise ScenarioError(p, "required field missing", getattr(obj, "line", None))
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(p, f"expected a number, got {v!r}", _line(obj, key))
    if kind is int:
        if isinstance(v, float) and not v.is_integer():
            raise ScenarioError(p, f"expected an integer, got {v!r}", _line(obj, key))
        v = int(v)
    else:
        v = float(v)
        if not math.isfinite(v):
            raise ScenarioError(p, "must be finite", _line(obj, key))
    if lo is not None and v < lo:
        raise ScenarioError(p, f"must be >= {lo}, got {v}", _line(obj, key))
    if hi is not None and v > hi:
        raise ScenarioError(p, f"must be <= {hi}, got {v}", _line(obj, key))
    return v


def _bool(obj, key, path, default):
    if key not in obj:
        return default
    v = obj[key]
    if not isinstance(v, bool):
        raise ScenarioError(f"{path}.{key}", f"expected true/false, got {v!r}", _line(obj, key))
    return v


def _str(obj, key, path, default=None, choices=None, required=False):
    p = f"{path}.{key}" if path else key
    if key not in obj:
        if required:
            raise ScenarioError(p, "required field missing", getattr(obj, "line", None))
        return default
    v = obj[key]
    if not isinstance(v, str):
        raise ScenarioError(p, f"expected a string, got {v!r}", _line(obj, key))
    if choices and v not in choices:
        raise ScenarioError(p, f"must be one of {sorted(choices)}, got {v!r}", _line(obj, key))
    return v


def _list(obj, key, path):
    if key not in obj or obj[key] is None:
        return []
    v = obj[key]
    if not isinstance(v, list):
        raise ScenarioError(f"{path}.{key}" if path else key, "expected a list", _line(obj, key))
    return v


def _dataclass_block(obj, key, cls, path="", bools=(), strings=None, ints=()):
    """Parse a flat block of numeric fields into dataclass ``cls`` (all fields optional)."""
    if key not in obj or obj[key] is None:
        return cls()
    block = obj[key]
    p = f"{path}.{key}" if path else key
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(block, names, p)
    kwargs = {}
    for name in block:
        if name in bools:
            kwargs[name] = _bool(block, name, p, None)
        elif strings and name in strings:
            kwargs[name] = _str(block, name, p, choices=strings[name])
        elif name in ints:
            kwargs[name] = _num(block, name, p, int)
        else:
            kwargs[name] = _num(block, name, p)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(p, str(exc), getattr(block, "line", None)) from None


TOP_KEYS = {
    "name", "seed", "duration_s", "max_hops", "key", "building", "radio", "pathloss", "links",
    "mac", "routing", "ota", "traffic", "nodes", "attached_endpoints", "faults", "commands",
    "snapshot_period_s",
}


def parse_scenario(doc: Any, base_dir: Path | None = None) -> Scenario:
    if doc is None:
        raise ScenarioError("<root>", "empty scenario")
    _check_keys(doc, TOP_KEYS, "")
    sc = Scenario(base_dir=base_dir)
    sc.name = _str(doc, "name", "", default="scenario")
    sc.seed = _num(doc, "seed", "", int, default=1, lo=0)
    sc.duration_s = _num(doc, "duration_s", "", default=86400.0, lo=0.0)
    if sc.duration_s <= 0:
        raise ScenarioError("duration_s", "must be positive", _line(doc, "duration_s"))
    sc.max_hops = _num(doc, "max_hops", "", int, default=0, lo=0, hi=255)
    sc.snapshot_period_s = _num(doc, "snapshot_period_s", "", default=21600.0, lo=1.0)
    if "key" in doc:
        k = _str(doc, "key", "")
        try:
            sc.key = bytes.fromhex(k)
        except ValueError:
            raise ScenarioError("key", "expected 32 hex digits", _line(doc, "key")) from None
        if len(sc.key) != 16:
            raise ScenarioError("key", "AES-128 key must be 16 bytes (32 hex digits)", _line(doc, "key"))

    # building
    if "building" in doc:
        b = doc["building"]
        _check_keys(b, {"dimensions", "floors", "lowest_floor", "floor_height", "blocks"}, "building")
        dims = b.get("dimensions", [50.0, 50.0, 30.0])
        if not isinstance(dims, list) or len(dims) != 3 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in dims
        ):
            raise ScenarioError("building.dimensions", "expected [x, y, z] positive metres", _line(b, "dimensions"))
        blocks = {}
        if b.get("blocks") is not None:
            bl = b["blocks"]
            if not isinstance(bl, dict):
                raise ScenarioError("building.blocks", "expected a mapping name -> [x0, y0, x1, y1]", _line(b, "blocks"))
            for name, rect in bl.items():
                if rect is not None and (
                    not isinstance(rect, list) or len(rect) != 4
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rect)
                ):
                    raise ScenarioError(f"building.blocks.{name}", "expected [x0, y0, x1, y1]", _line(bl, name))
                blocks[str(name)] = tuple(float(v) for v in rect) if rect else None
        sc.building = BuildingGeometry(
            dimensions=tuple(float(v) for v in dims),
            floor_count=_num(b, "floors", "building", int, default=1, lo=1),
            lowest_floor=_num(b, "lowest_floor", "building", int, default=0),
            floor_height=_num(b, "floor_height", "building", default=3.0, lo=0.5),
            blocks=blocks,
        )

    # radio
    sc.phy = _dataclass_block(
        doc, "radio", PhyParams,
        bools={"explicit_header", "crc_on", "low_datarate_optimize"},
        ints={"spreading_factor", "bandwidth", "coding_rate", "preamble_symbols"},
    )

    # path loss
    if "pathloss" in doc and doc["pathloss"] is not None:
        pl = doc["pathloss"]
        names = {f.name for f in dataclasses.fields(PathLossModel)} | {"wall_overrides"}
        _check_keys(pl, names, "pathloss")
        kwargs = {}
        for name in pl:
            if name == "wall_overrides":
                continue
            if name == "sensitivity":
                sens = pl["sensitivity"]
                if not isinstance(sens, dict):
                    raise ScenarioError("pathloss.sensitivity", "expected a mapping SF -> dBm", _line(pl, name))
                for sf in sens:
                    if not isinstance(sf, int) or not 7 <= sf <= 12:
                        raise ScenarioError(f"pathloss.sensitivity.{sf}", "spreading factor must be 7..12",
                                            _line(sens, sf))
                    _num(sens, sf, "pathloss.sensitivity")
                kwargs[name] = dict(sens)
            else:
                kwargs[name] = _num(pl, name, "pathloss")
        try:
            sc.pathloss = PathLossModel(**kwargs)
        except ValueError as exc:
            raise ScenarioError("pathloss", str(exc), getattr(pl, "line", None)) from None
        for i, ov in enumerate(_list(pl, "wall_overrides", "pathloss")):
            p = f"pathloss.wall_overrides[{i}]"
            _check_keys(ov, {"a", "b", "walls"}, p)
            a = _num(ov, "a", p, int, required=True)
            bb = _num(ov, "b", p, int, required=True)
            sc.wall_overrides[frozenset((a, bb))] = _num(ov, "walls", p, int, required=True, lo=0)
    if sc.phy.spreading_factor not in sc.pathloss.sensitivity:
        raise ScenarioError("pathloss.sensitivity", f"no sensitivity for SF{sc.phy.spreading_factor}")

    # blocks of numeric parameters
    sc.mac = _dataclass_block(doc, "mac", MacConfig, ints={"queue_capacity", "max_retries"})
    sc.routing = _dataclass_block(
        doc, "routing", RoutingConfig,
        strings={"etx_mode": {"estimated", "fixed"}},
        ints={"doublings", "redundancy", "hysteresis", "rank_change_threshold", "detach_failures"},
    )
    sc.ota = _dataclass_block(
        doc, "ota", OtaConfig, ints={"chunk_size", "suppress_after", "manifest_every", "progress_step", "silence_intervals"},
    )
    sc.traffic = _dataclass_block(doc, "traffic", TrafficConfig)

    # nodes
    raw_nodes = _list(doc, "nodes", "")
    seen: dict[int, int] = {}
    for i, n in enumerate(raw_nodes):
        p = f"nodes[{i}]"
        _check_keys(n, {"id", "x", "y", "floor", "block", "role"}, p)
        nid = _num(n, "id", p, int, required=True, lo=1, hi=0xFFFE)
        if nid in seen:
            raise ScenarioError(f"{p}.id", f"duplicate node id {nid} (first defined at nodes[{seen[nid]}])",
                                _line(n, "id"))
        seen[nid] = i
        spec = NodeSpec(
            id=nid,
            x=_num(n, "x", p, default=0.0),
            y=_num(n, "y", p, default=0.0),
            floor=_num(n, "floor", p, int, default=0),
            block=_str(n, "block", p, default=""),
            role=_str(n, "role", p, default="router", choices={"router", "gateway"}),
        )
        sc.nodes.append(spec)
        sc._node_lines = getattr(sc, "_node_lines", {})
        sc._node_lines[nid] = getattr(n, "line", None)

    # explicit links
    if "links" in doc and doc["links"] is not None:
        sc.links = []
        for i, ln in enumerate(_list(doc, "links", "")):
            p = f"links[{i}]"
            _check_keys(ln, {"a", "b", "prr", "etx", "rssi"}, p)
            entry = {
                "a": _num(ln, "a", p, int, required=True),
                "b": _num(ln, "b", p, int, required=True),
                "prr": _num(ln, "prr", p, default=1.0, lo=0.0, hi=1.0),
            }
            if "etx" in ln:
                entry["etx"] = _num(ln, "etx", p, lo=1.0)
            if "rssi" in ln:
                entry["rssi"] = _num(ln, "rssi", p)
            for end in ("a", "b"):
                if entry[end] not in seen:
                    raise ScenarioError(f"{p}.{end}", f"unknown node {entry[end]}", _line(ln, end))
            if entry["a"] == entry["b"]:
                raise ScenarioError(p, "link endpoints must differ", getattr(ln, "line", None))
            sc.links.append(entry)

    for i, e in enumerate(_list(doc, "attached_endpoints", "")):
        p = f"attached_endpoints[{i}]"
        _check_keys(e, {"host_node", "extra_period_s"}, p)
        host = _num(e, "host_node", p, int, required=True)
        if host not in seen:
            raise ScenarioError(f"{p}.host_node", f"unknown node {host}", _line(e, "host_node"))
        sc.endpoints.append(EndpointSpec(host, _num(e, "extra_period_s", p, required=True, lo=1.0)))

    for i, f in enumerate(_list(doc, "faults", "")):
        p = f"faults[{i}]"
        _check_keys(f, {"t", "node", "kind"}, p)
        spec = FaultSpec(
            t=_num(f, "t", p, required=True, lo=0.0),
            node=_num(f, "node", p, int, required=True),
            kind=_str(f, "kind", p, required=True, choices={"kill", "revive"}),
        )
        spec._line = getattr(f, "line", None)
        sc.faults.append(spec)

    for i, c in enumerate(_list(doc, "commands", "")):
        p = f"commands[{i}]"
        _check_keys(c, {"t", "kind", "image_bytes", "image_file", "image_id", "version", "node"}, p)
        spec = CommandSpec(
            t=_num(c, "t", p, required=True, lo=0.0),
            kind=_str(c, "kind", p, required=True, choices={"ota_start", "ota_activate", "ping", "query_topology"}),
            image_bytes=_num(c, "image_bytes", p, int, lo=1),
            image_file=_str(c, "image_file", p),
            image_id=_num(c, "image_id", p, int, default=1, lo=0, hi=0xFFFFFFFF),
            version=_num(c, "version", p, int, default=2, lo=0, hi=0xFFFFFFFF),
            node=_num(c, "node", p, int),
        )
        spec._line = getattr(c, "line", None)
        sc.commands.append(spec)

    validate(sc)
    return sc


def validate(sc: Scenario) -> None:
    """Cross-field checks shared by file loading and programmatic construction."""
    lines = getattr(sc, "_node_lines", {})
    ids = [n.id for n in sc.nodes]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[0]
        raise ScenarioError("nodes", f"duplicate node id {dup}", lines.get(dup))
    if not sc.gateways:
        raise ScenarioError("nodes", "at least one node must have role: gateway")
    for g in sc.gateways:
        if not 1 <= g <= 0x000F:
            raise ScenarioError("nodes", f"gateway id {g} outside 1..15", lines.get(g))
    for n in sc.nodes:
        if n.role == "router" and n.id <= 0x000F:
            raise ScenarioError("nodes", f"router id {n.id} inside the gateway range 1..15", lines.get(n.id))
        if sc.links is None:
            problem = sc.building.check(n.placement)
            if problem:
                raise ScenarioError("nodes", f"node {n.id}: {problem}", lines.get(n.id))
    if sc.mac.duty_limit <= 0 or sc.mac.duty_limit > 1:
        raise ScenarioError("mac.duty_limit", "must be in (0, 1]")
    if sc.mac.queue_capacity < 1:
        raise ScenarioError("mac.queue_capacity", "must be >= 1")
    if not MIN_CHUNK <= sc.ota.chunk_size <= MAX_CHUNK:
        raise ScenarioError("ota.chunk_size", f"must be {MIN_CHUNK}..{MAX_CHUNK}")
    if sc.traffic.status_period_s <= 0:
        raise ScenarioError("traffic.status_period_s", "must be positive")
    idset = set(ids)
    alive = {i: True for i in ids}
    order = sorted(range(len(sc.faults)), key=lambda i: (sc.faults[i].t, i))
    for i in order:
        f = sc.faults[i]
        line = getattr(f, "_line", None)
        p = f"faults[{i}]"
        if f.t > sc.duration_s:
            raise InvalidFault(p, f"fault time {f.t} is after duration_s {sc.duration_s}", line)
        if f.node not in idset:
            raise InvalidFault(p, f"unknown node {f.node}", line)
        if f.kind == "kill":
            if not alive[f.node]:
                raise InvalidFault(p, f"kill of node {f.node}, which is already dead", line)
            alive[f.node] = False
        else:
            if alive[f.node]:
                raise InvalidFault(p, f"revive of node {f.node}, which is alive", line)
            alive[f.node] = True
    started: set[int] = set()
    for i in sorted(range(len(sc.commands)), key=lambda i: (sc.commands[i].t, i)):
        c = sc.commands[i]
        line = getattr(c, "_line", None)
        p = f"commands[{i}]"
        if c.t > sc.duration_s:
            raise ScenarioError(p, f"command time {c.t} is after duration_s {sc.duration_s}", line)
        if c.kind == "ota_start":
            if (c.image_bytes is None) == (c.image_file is None):
                raise ScenarioError(p, "ota_start needs exactly one of image_bytes or image_file", line)
            started.add(c.image_id)
        elif c.kind == "ota_activate":
            if c.image_id not in started:
                raise ScenarioError(p, f"ota_activate for image {c.image_id} that was never started", line)
        elif c.kind == "ping":
            if c.node not in idset:
                raise ScenarioError(p, f"ping of unknown node {c.node}", line)


def load_scenario(text: str, base_dir: Path | None = None) -> Scenario:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except ScenarioError:
        raise
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError("<yaml>", str(exc.problem or exc), line) from None
    except yaml.YAMLError as exc:
        raise ScenarioError("<yaml>", str(exc)) from None
    return parse_scenario(doc, base_dir)


def load_scenario_file(path) -> Scenario:
    p = Path(path)
    return load_scenario(p.read_text(encoding="utf-8"), base_dir=p.parent)


def bundled(name: str) -> Scenario:
    """Load a scenario shipped with the package, e.g. ``bundled("carlingford-2gw")``."""
    from importlib import resources

    ref = resources.files("lightmesh") / "data" / f"{name}.yaml"
    return load_scenario(ref.read_text(encoding="utf-8"))


def bundled_path(name: str) -> Path:
    from importlib import resources

    return Path(str(resources.files("lightmesh") / "data" / f"{name}.yaml"))
