"""Run reports: structured JSON, per-node CSV, human summary and sweep aggregates."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from typing import Any

from ..frames import MAX_FRAME, airtime

FLOAT_DIGITS = 6


def _round(obj: Any) -> Any:
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return round(obj, FLOAT_DIGITS)
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _median_depth(samples: list[int], skip: int = 1) -> int | None:
    vals = [d for d in samples[skip:] if d >= 0] or [d for d in samples if d >= 0]
    if not vals:
        return None
    return int(statistics.median_low(vals))


def build_report(sim) -> dict:
    """Summarise a finished :class:`Simulator` run. Pure function of the sim state."""
    from .engine import duty_max_airtime

    sc = sim.scenario
    window = sc.mac.duty_window_s
    budget = sc.mac.duty_limit * window
    slack = airtime(sc.phy, MAX_FRAME) / 1000.0
    per_node: dict[int, dict] = {}
    for nid, node in sim.nodes.items():
        per_node[nid] = {"generated": 0, "delivered": 0, "lost": 0, "in_flight": 0, "hops": 0}
    hist: dict[int, int] = {}
    total_hops = 0
    for p in sim.packets.values():
        row = per_node[p.origin]
        row["generated"] += 1
        if p.state == 1:
            row["delivered"] += 1
            row["hops"] += p.hops
            hist[p.hops] = hist.get(p.hops, 0) + 1
            total_hops += p.hops
        elif p.state == 2:
            row["lost"] += 1
        else:
            row["in_flight"] += 1

    parents = sim.parents()
    nodes_out = []
    duty_violations = []
    max_util = 0.0
    utils = []
    for nid, node in sim.nodes.items():
        row = per_node[nid]
        used = duty_max_airtime(node.mac.tx_log, window)
        util = used / window
        utils.append(util)
        max_util = max(max_util, util)
        if used > budget + slack + 1e-9:
            duty_violations.append(nid)
        depth_now = sim.depth_of(nid, parents) if node.alive else None
        st = node.state
        gen = row["generated"]
        nodes_out.append({
            "id": nid,
            "role": "gateway" if node.is_gateway else "router",
            "floor": node.spec.floor,
            "block": node.spec.block,
            "generated": gen,
            "delivered": row["delivered"],
            "lost": row["lost"],
            "in_flight": row["in_flight"],
            "prr": (row["delivered"] / gen) if gen else None,
            "mean_hops": (row["hops"] / row["delivered"]) if row["delivered"] else None,
            "depth": depth_now,
            "depth_median": 0 if node.is_gateway else _median_depth(sim.depth_samples[nid]),
            "rank": st.rank,
            "parent": st.parent,
            "root": st.root_id if node.alive else None,
            "alive": node.alive,
            "firmware_version": node.fw_version,
            "duty_max_utilization": util,
            "tx_airtime_s": sum(e - s for s, e in node.mac.tx_log),
            "evictions": node.mac.evictions,
            "parent_changes": node.parent_changes,
            "detaches": node.detaches,
            "ota_staged_s": (sim.ota_staged[nid] - sim.ota_started_at) if nid in sim.ota_staged else None,
        })

    generated = sum(r["generated"] for r in per_node.values())
    delivered = sum(r["delivered"] for r in per_node.values())
    lost = sum(r["lost"] for r in per_node.values())
    in_flight = sum(r["in_flight"] for r in per_node.values())
    routers = [n for n in nodes_out if n["role"] == "router"]
    depths = [n["depth_median"] for n in routers]
    attached_depths = [d for d in depths if d is not None]

    ota = None
    if sim.ota_started_at is not None:
        staged = {nid: t - sim.ota_started_at for nid, t in sorted(sim.ota_staged.items())}
        all_staged = len(staged) == len(routers)
        sources = [g.ota_source for g in sim.gateways if g.ota_source is not None]
        prop_done = [s.propagated_at for s in sources if s.propagated_at is not None]
        ota = {
            "image_id": sim.ota_image_id,
            "image_bytes": len(sim.ota_image),
            "started_at_s": sim.ota_started_at,
            "propagation_s": (max(prop_done) - sim.ota_started_at) if prop_done else None,
            "nodes_staged": len(staged),
            "nodes_total": len(routers),
            "node_completion_s": {str(k): v for k, v in staged.items()},
            "network_completion_s": max(staged.values()) if all_staged and staged else None,
            "digest_failures": sum(n.ota.digest_failures for n in sim.nodes.values() if n.ota is not None),
            "nodes_activated": len(sim.ota_activated),
        }

    healing = []
    for ev in sim.heal_events:
        rec = [ev.recovered[n] for n in ev.affected if n in ev.recovered]
        complete = len(rec) == len(ev.affected)
        healing.append({
            "fault_t": ev.fault_t,
            "node": ev.node,
            "affected": ev.affected,
            "recovered": len(rec),
            "recovery_t": (max(rec) if rec else ev.fault_t) if complete else None,
            "healing_s": ((max(rec) - ev.fault_t) if rec else 0.0) if complete else None,
        })

    report = {
        "scenario": sc.name,
        "seed": sim.seed,
        "duration_s": sc.duration_s,
        "max_hops": sc.max_hops,
        "network": {
            "generated": generated,
            "delivered": delivered,
            "lost": lost,
            "in_flight": in_flight,
            "prr": delivered / generated if generated else None,
            "mean_path_length": total_hops / delivered if delivered else None,
            "hop_histogram": {str(k): hist[k] for k in sorted(hist)},
            "depth_le2_fraction": (sum(1 for d in attached_depths if d <= 2) / len(routers)) if routers else None,
            "max_depth": max(attached_depths) if attached_depths else None,
            "unattached_nodes": sum(1 for d in depths if d is None),
        },
        "dodag_snapshots": sim.snapshots,
        "ota": ota,
        "healing": healing,
        "duty_cycle": {
            "limit": sc.mac.duty_limit,
            "max_utilization": max_util,
            "mean_utilization": sum(utils) / len(utils) if utils else 0.0,
            "violations": duty_violations,
        },
        "counters": {
            "drops": dict(sorted(sim.drops.items())),
            "evictions": sum(n.mac.evictions for n in sim.nodes.values()),
            "channel": dict(sim.channel.outcomes),
            "transmissions": sim.channel.transmissions,
            "routing_events": sim.routing_events,
            "acyclicity_checks": sim.acyclicity_checks,
            "version_bumps": sim.version_bumps,
            "malformed": sim.malformed + sim.northbound.malformed,
        },
        "northbound": {
            "raw_records": len(sim.northbound.raw),
            "records": len(sim.northbound.merged),
            "duplicates": sim.northbound.duplicates,
        },
        "nodes": nodes_out,
    }
    return _round(report)


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


CSV_FIELDS = [
    "id", "role", "floor", "block", "generated", "delivered", "lost", "in_flight", "prr", "mean_hops",
    "depth", "depth_median", "rank", "parent", "root", "alive", "firmware_version", "duty_max_utilization",
    "tx_airtime_s", "evictions", "parent_changes", "detaches", "ota_staged_s",
]


def nodes_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in report["nodes"]:
        w.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_FIELDS})
    return buf.getvalue()


def _fmt(v, spec: str = ".6f", none: str = "n/a") -> str:
    return none if v is None else format(v, spec)


def summary_text(report: dict) -> str:
    """Human-readable summary; every number printed is a report field verbatim."""
    net = report["network"]
    lines = [
        f"scenario: {report['scenario']}  seed: {report['seed']}  duration_s: {report['duration_s']}"
        f"  max_hops: {report['max_hops']}",
        f"network PRR: {_fmt(net['prr'])}  ({net['delivered']}/{net['generated']} delivered,"
        f" {net['lost']} lost, {net['in_flight']} in flight)",
        f"mean path length: {_fmt(net['mean_path_length'])} hops",
        "hop histogram: " + (", ".join(f"{k}:{v}" for k, v in net["hop_histogram"].items()) or "empty"),
        f"nodes at depth <= 2: {_fmt(net['depth_le2_fraction'])}  max depth: {net['max_depth']}"
        f"  unattached: {net['unattached_nodes']}",
        f"duty cycle max utilization: {_fmt(report['duty_cycle']['max_utilization'])}"
        f"  violations: {len(report['duty_cycle']['violations'])}",
    ]
    ota = report["ota"]
    if ota is not None:
        lines.append(
            f"OTA image {ota['image_id']} ({ota['image_bytes']} bytes): staged {ota['nodes_staged']}/{ota['nodes_total']},"
            f" propagation_s: {_fmt(ota['propagation_s'])}, network_completion_s: {_fmt(ota['network_completion_s'])}"
            f", activated: {ota['nodes_activated']}"
        )
    else:
        lines.append("OTA: none")
    if report["healing"]:
        for h in report["healing"]:
            lines.append(
                f"healing: fault_t {_fmt(h['fault_t'])} node {h['node']} affected {len(h['affected'])}"
                f" recovered {h['recovered']} healing_s {_fmt(h['healing_s'])}"
            )
    else:
        lines.append("healing: no faults")
    return "\n".join(lines) + "\n"


# --- sweeps -----------------------------------------------------------------------------------

SWEEP_METRICS = ("prr", "mean_path_length", "ota_completion_s")


def sweep_row(report: dict) -> dict:
    ota = report.get("ota") or {}
    return {
        "seed": report["seed"],
        "prr": report["network"]["prr"],
        "mean_path_length": report["network"]["mean_path_length"],
        "ota_completion_s": ota.get("network_completion_s"),
    }


def merge_rows(rows: list[dict]) -> dict:
    """Aggregate per-seed rows. Order-independent: rows are sorted by seed first."""
    rows = sorted(rows, key=lambda r: r["seed"])
    agg: dict[str, Any] = {"runs": len(rows), "seeds": [r["seed"] for r in rows], "rows": rows}
    for m in SWEEP_METRICS:
        vals = sorted(r[m] for r in rows if r[m] is not None)
        if not vals:
            agg[m] = {"mean": None, "stddev": None, "n": 0}
            continue
        mean = math.fsum(vals) / len(vals)
        sd = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        agg[m] = {"mean": mean, "stddev": sd, "n": len(vals)}
    return _round(agg)
