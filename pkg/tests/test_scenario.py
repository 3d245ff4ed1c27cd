import textwrap

import pytest

from lightmesh.sim import InvalidFault, ScenarioError, bundled, load_scenario, load_scenario_file
from lightmesh.sim.scenario import bundled_path


def load(text):
    return load_scenario(textwrap.dedent(text))


MINIMAL = """\
nodes:
  - {id: 1, role: gateway}
  - {id: 100, x: 10}
"""


def test_minimal_scenario_takes_defaults():
    sc = load(MINIMAL)
    assert sc.duration_s == 86400.0 and sc.seed == 1 and sc.max_hops == 0
    assert sc.gateways == [1] and sc.routers == [100]
    assert sc.mac.duty_limit == 0.01 and sc.phy.spreading_factor == 7
    assert sc.links is None


def test_duplicate_node_id_names_id_and_line():
    with pytest.raises(ScenarioError) as err:
        load(MINIMAL + "  - {id: 100, x: 20}\n")
    assert err.value.path == "nodes[2].id" and err.value.line == 4
    assert "duplicate node id 100" in str(err.value)


def test_unknown_field_names_path_and_line():
    with pytest.raises(ScenarioError) as err:
        load("duration_s: 60\nmac:\n  duty_limt: 0.02\n" + MINIMAL)
    assert err.value.path == "mac.duty_limt" and err.value.line == 3
    assert "unknown field" in str(err.value)


def test_fault_after_duration_rejected():
    text = "duration_s: 3600\n" + MINIMAL + "faults:\n  - {t: 4000, node: 100, kind: kill}\n"
    with pytest.raises(InvalidFault) as err:
        load(text)
    assert err.value.path == "faults[0]" and err.value.line == 6


def test_revive_of_live_node_rejected():
    text = MINIMAL + "faults:\n  - {t: 10, node: 100, kind: revive}\n"
    with pytest.raises(InvalidFault, match="alive"):
        load(text)


@pytest.mark.parametrize(
    "snippet, path",
    [
        ("seed: -1\n", "seed"),
        ("duration_s: abc\n", "duration_s"),
        ("key: 00ff\n", "key"),
        ("ota: {chunk_size: 300}\n", "ota.chunk_size"),
        ("routing: {etx_mode: magic}\n", "routing.etx_mode"),
    ],
)
def test_invalid_values_name_their_key(snippet, path):
    with pytest.raises(ScenarioError) as err:
        load(snippet + MINIMAL)
    assert err.value.path == path


def test_router_in_gateway_id_range_rejected():
    with pytest.raises(ScenarioError, match="gateway range"):
        load("nodes:\n  - {id: 1, role: gateway}\n  - {id: 5}\n")


def test_no_gateway_rejected():
    with pytest.raises(ScenarioError, match="gateway"):
        load("nodes:\n  - {id: 100}\n")


def test_node_outside_building_rejected():
    with pytest.raises(ScenarioError, match="node 100"):
        load("building: {dimensions: [10, 10, 9], floors: 3}\n" + MINIMAL.replace("x: 10", "x: 50"))


def test_yaml_syntax_error_has_line():
    with pytest.raises(ScenarioError) as err:
        load("nodes:\n  - {id: 1\n")
    assert err.value.line is not None


def test_link_to_unknown_node_rejected():
    with pytest.raises(ScenarioError) as err:
        load(MINIMAL + "links:\n  - {a: 1, b: 7}\n")
    assert err.value.path == "links[0].b"


def test_image_is_deterministic_per_command():
    sc = load("duration_s: 100\n" + MINIMAL + "commands:\n  - {t: 1, kind: ota_start, image_bytes: 500}\n")
    image = sc.image_for(sc.commands[0])
    assert len(image) == 500 and image == sc.image_for(sc.commands[0])


def test_image_file(tmp_path):
    (tmp_path / "fw.bin").write_bytes(b"firmware")
    path = tmp_path / "s.yaml"
    path.write_text("duration_s: 100\n" + MINIMAL + "commands:\n  - {t: 1, kind: ota_start, image_file: fw.bin}\n")
    sc = load_scenario_file(path)
    assert sc.image_for(sc.commands[0]) == b"firmware"


@pytest.mark.parametrize("name, gateways", [("carlingford-1gw", 1), ("carlingford-2gw", 2)])
def test_bundled_scenarios(name, gateways):
    sc = bundled(name)
    assert len(sc.gateways) == gateways
    assert len(sc.routers) == 69
    assert load_scenario_file(bundled_path(name)).nodes == sc.nodes
