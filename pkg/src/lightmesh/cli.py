"""Command-line entry point: ``lightmesh run | sweep | topology``.

Exit codes
----------
0  success
2  usage error (bad flags, empty seed range)
3  scenario error (missing file, parse or validation failure)
4  runtime invariant violation inside the simulator
5  output could not be written
"""
from __future__ import annotations

import argparse
import json
import os
import re
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .sim import (
    InvariantViolation,
    Scenario,
    ScenarioError,
    Simulator,
    bundled,
    load_scenario_file,
    merge_rows,
    nodes_csv,
    report_json,
    summary_text,
    sweep_row,
)
from .sim.scenario import CommandSpec

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCENARIO = 3
EXIT_INVARIANT = 4
EXIT_IO = 5

OUT_ENV = "LIGHTMESH_OUT"
DEFAULT_OUT = "lightmesh-out"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- scenario loading ------------------------------------------------------------------------


def load(path_or_name: str) -> Scenario:
    """A scenario file path, or the name of a bundled scenario (``carlingford-2gw``)."""
    p = Path(path_or_name)
    if p.is_file():
        try:
            return load_scenario_file(p)
        except (OSError, UnicodeDecodeError) as exc:
            raise ScenarioError(str(p), f"cannot read scenario: {exc}") from exc
    if p.suffix == "" and os.sep not in path_or_name:
        try:
            return bundled(path_or_name)
        except FileNotFoundError:
            pass
    raise ScenarioError(str(path_or_name), "no such scenario file or bundled scenario")


def apply_overrides(sc: Scenario, args) -> Scenario:
    changes = {}
    if getattr(args, "duration_override", None) is not None:
        if args.duration_override <= 0:
            raise ScenarioError("duration_s", "duration override must be positive")
        changes["duration_s"] = float(args.duration_override)
    if getattr(args, "max_hops", None) is not None:
        if args.max_hops < 0:
            raise ScenarioError("max_hops", "must be >= 0")
        changes["max_hops"] = args.max_hops
    if getattr(args, "ota_image", None):
        image = Path(args.ota_image)
        if not image.is_file():
            raise ScenarioError("ota_image", f"no such file: {image}")
        cmd = CommandSpec(t=float(args.ota_start), kind="ota_start", image_file=str(image.resolve()))
        changes["commands"] = sorted([*sc.commands, cmd], key=lambda c: c.t)
    return sc.replace(**changes) if changes else sc


# --- outputs ---------------------------------------------------------------------------------


def out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def write_outputs(target: Path, files: dict[str, str]) -> None:
    """Write all files or none: stage in a temp dir next to ``target``, then move into place."""
    try:
        target.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".lightmesh-", dir=target))
        try:
            for name, text in files.items():
                (staging / name).write_text(text, encoding="utf-8")
            for name in files:
                os.replace(staging / name, target / name)
        finally:
            shutil.rmtree(staging, ignore_errors=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs to {target}: {exc}") from exc


def summary_record(report: dict) -> dict:
    """The human summary's numbers as one structured record."""
    net = report["network"]
    ota = report["ota"] or {}
    return {
        "scenario": report["scenario"],
        "seed": report["seed"],
        "duration_s": report["duration_s"],
        "max_hops": report["max_hops"],
        "prr": net["prr"],
        "delivered": net["delivered"],
        "generated": net["generated"],
        "mean_path_length": net["mean_path_length"],
        "hop_histogram": net["hop_histogram"],
        "depth_le2_fraction": net["depth_le2_fraction"],
        "ota_network_completion_s": ota.get("network_completion_s"),
        "healing_s": [h["healing_s"] for h in report["healing"]],
        "duty_max_utilization": report["duty_cycle"]["max_utilization"],
    }


# --- commands --------------------------------------------------------------------------------


def _simulate(sc: Scenario, seed: int | None, trace_path: str | None = None):
    trace = None
    try:
        if trace_path:
            trace = open(trace_path, "w", encoding="utf-8")
        sim = Simulator(sc, seed=seed, trace=trace)
        report = sim.run()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write trace: {exc}") from exc
    finally:
        if trace is not None:
            trace.close()
    return sim, report


def cmd_run(args) -> int:
    sc = apply_overrides(load(args.scenario), args)
    sim, report = _simulate(sc, args.seed, args.trace)
    buf = []

    class _Sink:
        def write(self, s):
            buf.append(s)

    sim.northbound.write_ndjson(_Sink())
    text = summary_text(report)
    write_outputs(out_dir(args), {
        "report.json": report_json(report),
        "nodes.csv": nodes_csv(report),
        "summary.txt": text,
        "northbound.ndjson": "".join(buf),
    })
    if args.format == "records":
        print(json.dumps(summary_record(report), sort_keys=True))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def parse_seeds(spec: str) -> list[int]:
    """``1-10``, ``3``, or ``1,4,9``."""
    seeds: set[int] = set()
    for part in filter(None, (x.strip() for x in spec.split(","))):
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if m is None:
            raise CliError(EXIT_USAGE, f"bad seed range {spec!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        seeds.update(range(lo, hi + 1))
    if not seeds:
        raise CliError(EXIT_USAGE, f"empty seed range {spec!r}")
    return sorted(seeds)


def _sweep_one(sc: Scenario, seed: int) -> dict:
    return sweep_row(Simulator(sc, seed=seed).run())


def cmd_sweep(args) -> int:
    seeds = parse_seeds(args.seeds)
    sc = apply_overrides(load(args.scenario), args)
    jobs = max(1, args.jobs)
    if jobs == 1:
        rows = [_sweep_one(sc, s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {s: pool.submit(_sweep_one, sc, s) for s in seeds}
            rows = []
            for s, fut in futures.items():
                try:
                    rows.append(fut.result())
                except InvariantViolation as exc:
                    raise InvariantViolation(f"seed {s}: {exc}") from exc
    agg = merge_rows(rows)
    text = json.dumps(agg, sort_keys=True, indent=1) + "\n"
    lines = ["seed,prr,mean_path_length,ota_completion_s"]
    for r in agg["rows"]:
        lines.append(",".join("" if r[k] is None else str(r[k]) for k in
                              ("seed", "prr", "mean_path_length", "ota_completion_s")))
    write_outputs(out_dir(args), {"sweep.json": text, "sweep.csv": "\n".join(lines) + "\n"})
    if args.format == "records":
        for r in agg["rows"]:
            print(json.dumps(r, sort_keys=True))
    else:
        for m in ("prr", "mean_path_length", "ota_completion_s"):
            a = agg[m]
            mean = "n/a" if a["mean"] is None else f"{a['mean']:.6f}"
            sd = "n/a" if a["stddev"] is None else f"{a['stddev']:.6f}"
            print(f"{m}: mean {mean} stddev {sd} (n={a['n']})")
    return EXIT_OK


def topology_dot(rows: list[dict], t: float, name: str) -> str:
    """Graphviz DOT: one vertex per node, one edge child -> parent."""
    lines = [f'digraph "{name}" {{', f'  label="{name} DODAG at t={t:g} s";', "  rankdir=BT;"]
    for r in rows:
        attrs = {
            "rank": r["rank"],
            "root": "" if r["root"] is None else r["root"],
            "block": r["block"],
            "floor": r["floor"],
            "depth": "" if r["depth"] is None else r["depth"],
        }
        shape = "doublecircle" if r["role"] == "gateway" else ("circle" if r["alive"] else "point")
        detail = " ".join(f'{k}="{v}"' for k, v in attrs.items())
        lines.append(f'  n{r["node"]} [label="{r["node"]}" shape={shape} {detail}];')
    for r in rows:
        if r["parent"] is not None and r["alive"]:
            lines.append(f'  n{r["node"]} -> n{r["parent"]};')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_topology(args) -> int:
    sc = apply_overrides(load(args.scenario), args)
    t = sc.duration_s if args.t is None else float(args.t)
    if not 0 <= t <= sc.duration_s:
        raise ScenarioError("t", f"snapshot time {t} outside 0..{sc.duration_s}")
    sim = Simulator(sc.replace(duration_s=t), seed=args.seed)
    sim.run()
    rows = sim.topology()
    dot = topology_dot(rows, t, sc.name)
    write_outputs(out_dir(args), {"topology.dot": dot, "topology.json": json.dumps(rows, indent=1) + "\n"})
    if args.format == "records":
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    else:
        sys.stdout.write(dot)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario YAML file, or a bundled name such as carlingford-2gw")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--duration-override", type=float, metavar="SECONDS", help="replace duration_s")
    common.add_argument("--max-hops", type=int, help="limit DODAG depth; 1 = star topology, 0 = unlimited")
    common.add_argument("--format", choices=("human", "records"), default="human", help="stdout format")

    p = argparse.ArgumentParser(prog="lightmesh", description="LoRa emergency-light mesh simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="simulate one scenario and write reports")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--trace", metavar="PATH", help="write the JSON-lines event trace here")
    run.add_argument("--ota-image", metavar="PATH", help="push this firmware image during the run")
    run.add_argument("--ota-start", type=float, default=1800.0, metavar="SECONDS",
                     help="virtual time of the --ota-image push (default 1800)")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", parents=[common], help="run several seeds and aggregate")
    sweep.add_argument("--seeds", default="1-10", help="seed range: 1-10, 3, or 1,4,9 (default 1-10)")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sweep.set_defaults(func=cmd_sweep)

    topo = sub.add_parser("topology", parents=[common], help="write the DODAG at a virtual time as DOT")
    topo.add_argument("--t", type=float, help="snapshot time in seconds (default: end of run)")
    topo.add_argument("--seed", type=int, help="override the scenario seed")
    topo.set_defaults(func=cmd_topology)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"lightmesh: {exc}", file=sys.stderr)
        return exc.code
    except ScenarioError as exc:
        print(f"lightmesh: scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except InvariantViolation as exc:
        print(f"lightmesh: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
