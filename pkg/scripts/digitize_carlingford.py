"""Regenerate the bundled Carlingford scenarios.

Light positions are an approximate digitisation of the published floor plan:
lights sit along the corridors of each block, 69 routers over ten levels
(three basement car-park levels). Coordinates are rounded to 0.1 m and the
output is committed, so re-running this script is only needed when the
layout itself changes.

    python scripts/digitize_carlingford.py src/lightmesh/data
"""
from __future__ import annotations

import random
import sys
from pathlib import Path

import yaml

FLOOR_HEIGHT = 3.1
BLOCKS = {
    "A": (0.0, 0.0, 45.0, 16.0),
    "B": (0.0, 16.0, 20.0, 52.0),
    "C": (25.0, 16.0, 45.0, 52.0),
    "P": (0.0, 0.0, 45.0, 52.0),
}
# lights per (floor, block); basement levels are one open car park
LAYOUT = {
    -3: {"P": 5}, -2: {"P": 6}, -1: {"P": 6},
    0: {"A": 3, "B": 3, "C": 2}, 1: {"A": 3, "B": 2, "C": 3}, 2: {"A": 2, "B": 3, "C": 2},
    3: {"A": 3, "B": 2, "C": 2}, 4: {"A": 2, "B": 3, "C": 2}, 5: {"A": 3, "B": 2, "C": 2},
    6: {"A": 2, "B": 3, "C": 3},
}
GATEWAYS = {
    1: {"x": 8.0, "y": 8.0, "floor": 6, "block": "A"},
    2: {"x": 30.0, "y": 40.0, "floor": -1, "block": "P"},
}

RADIO = {"spreading_factor": 7, "bandwidth": 250000, "coding_rate": 5, "tx_power": 14.0}
PATHLOSS = {
    "pl0": 40.0, "exponent": 3.0, "wall_db": 5.0, "floor_db": 24.0, "wall_spacing": 10.0,
    "shadow_sigma": 4.0, "packet_sigma": 2.0, "capture_margin": 6.0,
}


def corridor_points(block: str, k: int, rng: random.Random) -> list[tuple[float, float]]:
    x0, y0, x1, y1 = BLOCKS[block]
    pts = []
    for i in range(k):
        f = (i + 0.5) / k
        if x1 - x0 >= y1 - y0:
            x = x0 + f * (x1 - x0) + rng.uniform(-2.0, 2.0)
            y = (y0 + y1) / 2 + rng.uniform(-3.0, 3.0)
        else:
            x = (x0 + x1) / 2 + rng.uniform(-3.0, 3.0)
            y = y0 + f * (y1 - y0) + rng.uniform(-2.0, 2.0)
        pts.append((round(min(max(x, x0 + 0.5), x1 - 0.5), 1), round(min(max(y, y0 + 0.5), y1 - 0.5), 1)))
    return pts


def routers() -> list[dict]:
    rng = random.Random(20240501)
    out = []
    nid = 101
    for floor in sorted(LAYOUT):
        for block, k in LAYOUT[floor].items():
            for x, y in corridor_points(block, k, rng):
                out.append({"id": nid, "x": x, "y": y, "floor": floor, "block": block})
                nid += 1
    assert len(out) == 69, len(out)
    return out


def scenario(name: str, gateways: list[int]) -> dict:
    nodes = [{"id": g, **GATEWAYS[g], "role": "gateway"} for g in gateways]
    nodes += routers()
    return {
        "name": name,
        "seed": 1,
        "duration_s": 7 * 86400,
        "building": {
            "dimensions": [45.0, 52.0, 22.0],
            "floors": 10,
            "lowest_floor": -3,
            "floor_height": FLOOR_HEIGHT,
            "blocks": {k: list(v) for k, v in BLOCKS.items()},
        },
        "radio": dict(RADIO),
        "pathloss": dict(PATHLOSS),
        "traffic": {"status_period_s": 300.0},
        "nodes": nodes,
    }


def dump(doc: dict) -> str:
    header = (
        "# Carlingford building: 69 emergency lights, positions digitised approximately from the floor plan.\n"
        "# Generated by scripts/digitize_carlingford.py; calibration values are frozen here.\n"
    )
    nodes = doc.pop("nodes")
    body = yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
    lines = ["nodes:"]
    for n in nodes:
        fields = ", ".join(f"{k}: {v}" for k, v in n.items())
        lines.append(f"  - {{{fields}}}")
    return header + body + "\n".join(lines) + "\n"


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "carlingford-1gw.yaml").write_text(dump(scenario("carlingford-1gw", [1])))
    (out / "carlingford-2gw.yaml").write_text(dump(scenario("carlingford-2gw", [1, 2])))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/lightmesh/data")
