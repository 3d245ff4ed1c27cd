import json

import pytest

from lightmesh.cli import (
    EXIT_INVARIANT,
    EXIT_IO,
    EXIT_OK,
    EXIT_SCENARIO,
    EXIT_USAGE,
    CliError,
    main,
    parse_seeds,
    summary_record,
    topology_dot,
)

PAIR = """\
name: pair
duration_s: 7200
nodes:
  - {id: 1, role: gateway}
  - {id: 100}
links:
  - {a: 1, b: 100, prr: 0.9}
"""


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "pair.yaml"
    path.write_text(PAIR)
    return str(path)


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_parse_seeds():
    assert parse_seeds("1-3") == [1, 2, 3]
    assert parse_seeds("4") == [4]
    assert parse_seeds("9,1,4,1") == [1, 4, 9]
    for bad in ("", "a-b", "3-"):
        with pytest.raises(CliError) as err:
            parse_seeds(bad)
        assert err.value.code == EXIT_USAGE


def test_run_writes_all_outputs(scenario, tmp_path, capsys):
    out = tmp_path / "out"
    assert run_cli("run", scenario, "--out", out) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["nodes.csv", "northbound.ndjson", "report.json", "summary.txt"]
    report = json.loads((out / "report.json").read_text())
    assert capsys.readouterr().out == (out / "summary.txt").read_text()
    assert f"network PRR: {report['network']['prr']}" in (out / "summary.txt").read_text()
    lines = (out / "northbound.ndjson").read_text().splitlines()
    assert len(lines) == report["northbound"]["records"]


def test_same_seed_identical_files(scenario, tmp_path):
    for name in ("a", "b"):
        assert run_cli("run", scenario, "--seed", 7, "--out", tmp_path / name) == EXIT_OK
    for f in ("report.json", "nodes.csv", "summary.txt", "northbound.ndjson"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_records_format_matches_report(scenario, tmp_path, capsys):
    out = tmp_path / "out"
    assert run_cli("run", scenario, "--format", "records", "--out", out) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    report = json.loads((out / "report.json").read_text())
    assert record == summary_record(report)
    assert record["prr"] == report["network"]["prr"]


def test_single_seed_sweep_equals_run(scenario, tmp_path, capsys):
    assert run_cli("run", scenario, "--seed", 3, "--out", tmp_path / "run") == EXIT_OK
    assert run_cli("sweep", scenario, "--seeds", "3", "--out", tmp_path / "sweep") == EXIT_OK
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    sweep = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
    assert sweep["runs"] == 1
    assert sweep["prr"]["mean"] == report["network"]["prr"] and sweep["prr"]["stddev"] == 0.0
    assert sweep["rows"][0]["mean_path_length"] == report["network"]["mean_path_length"]


def test_sweep_parallel_equals_serial(scenario, tmp_path):
    assert run_cli("sweep", scenario, "--seeds", "1-3", "--out", tmp_path / "s") == EXIT_OK
    assert run_cli("sweep", scenario, "--seeds", "1-3", "--jobs", 2, "--out", tmp_path / "p") == EXIT_OK
    assert (tmp_path / "s" / "sweep.json").read_bytes() == (tmp_path / "p" / "sweep.json").read_bytes()


def test_topology_of_pair_has_one_edge(scenario, tmp_path, capsys):
    assert run_cli("topology", scenario, "--t", 3600, "--out", tmp_path) == EXIT_OK
    dot = (tmp_path / "topology.dot").read_text()
    assert dot.count("->") == 1 and "n100 -> n1;" in dot
    assert capsys.readouterr().out == dot


def test_topology_dot_marks_dead_nodes():
    rows = [
        {"node": 1, "role": "gateway", "alive": True, "parent": None, "rank": 256, "root": 1, "depth": 0,
         "floor": 0, "block": ""},
        {"node": 100, "role": "router", "alive": False, "parent": 1, "rank": 512, "root": None, "depth": None,
         "floor": 0, "block": ""},
    ]
    dot = topology_dot(rows, 5.0, "x")
    assert "->" not in dot and "shape=point" in dot and "shape=doublecircle" in dot


def test_missing_scenario_exit_code(tmp_path, capsys):
    assert run_cli("run", tmp_path / "nope.yaml", "--out", tmp_path / "o") == EXIT_SCENARIO
    assert "scenario error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_invalid_scenario_names_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(PAIR + "faults:\n  - {t: 9000, node: 100, kind: kill}\n")
    assert run_cli("run", bad, "--out", tmp_path / "o") == EXIT_SCENARIO
    assert "faults[0] (line 9)" in capsys.readouterr().err


def test_usage_errors(scenario, tmp_path):
    assert run_cli("frobnicate") == EXIT_USAGE
    assert run_cli("sweep", scenario, "--seeds", "x", "--out", tmp_path) == EXIT_USAGE
    assert run_cli("run", scenario, "--max-hops", "lots") == EXIT_USAGE


def test_unwritable_output_leaves_nothing(scenario, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    assert run_cli("run", scenario, "--out", blocker / "sub") == EXIT_IO


def test_no_partial_outputs_on_write_failure(scenario, tmp_path, monkeypatch):
    import os

    out = tmp_path / "out"
    real_replace = os.replace
    calls = []

    def flaky(src, dst):
        calls.append(dst)
        if len(calls) == 1:
            raise OSError("disk full")
        real_replace(src, dst)

    monkeypatch.setattr(os, "replace", flaky)
    assert run_cli("run", scenario, "--out", out) == EXIT_IO
    assert [p.name for p in out.iterdir()] == []


def test_invariant_violation_exit_code(scenario, tmp_path, monkeypatch):
    from lightmesh.sim import InvariantViolation, Simulator

    def boom(self):
        raise InvariantViolation("routing loop [100, 101]")

    monkeypatch.setattr(Simulator, "run", boom)
    assert run_cli("run", scenario, "--out", tmp_path / "o") == EXIT_INVARIANT
    assert not (tmp_path / "o").exists()


def test_bundled_scenario_with_overrides(tmp_path):
    out = tmp_path / "o"
    assert run_cli("run", "carlingford-2gw", "--duration-override", 1800, "--max-hops", 1, "--out", out) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["duration_s"] == 1800 and report["max_hops"] == 1


def test_ota_image_flag(scenario, tmp_path):
    image = tmp_path / "fw.bin"
    image.write_bytes(bytes(range(256)) * 4)
    out = tmp_path / "o"
    assert run_cli("run", scenario, "--ota-image", image, "--ota-start", 600, "--out", out) == EXIT_OK
    ota = json.loads((out / "report.json").read_text())["ota"]
    assert ota["image_bytes"] == 1024 and ota["nodes_staged"] == 1
