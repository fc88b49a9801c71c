import dataclasses
import json

import pytest

from voltplan import bundled_case
from voltplan.grid_model import (Bus, CaseError, EquipmentCatalog, Generator,
                                 Network, candidate_locations, load_case,
                                 save_case, validate)


def test_load_2bus(net2):
    assert len(net2.buses) == 2
    assert len(net2.branches) == 1
    assert sum(1 for g in net2.generators if g.is_slack_unit) == 1
    assert net2.slack_bus == "b1"


def test_load_14bus_counts(net14):
    # fixture authored by scripts/make_cases.py; counts checked independently
    assert len(net14.buses) == 14
    assert len(net14.branches) == 20
    assert len(net14.generators) == 5
    assert len(net14.target_buses) == 11
    assert len(net14.candidate_buses) == 11


def test_bundled_cases_validate_clean():
    for name in ("case_2bus", "case_5bus", "case_14bus"):
        net = load_case(bundled_case(name))
        assert validate(net) == []


def test_dangling_generator_reference(tmp_path):
    raw = json.loads(bundled_case("case_2bus").read_text())
    raw["generators"].append({"bus": "nowhere", "id": "gx"})
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(raw))
    with pytest.raises(CaseError, match="nowhere"):
        load_case(p)


def test_unknown_keys_rejected(tmp_path):
    raw = json.loads(bundled_case("case_2bus").read_text())
    raw["buses"][0]["mystery_field"] = 1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(raw))
    with pytest.raises(CaseError, match="mystery_field"):
        load_case(p)
    raw = json.loads(bundled_case("case_2bus").read_text())
    raw["surprise"] = {}
    p.write_text(json.dumps(raw))
    with pytest.raises(CaseError, match="surprise"):
        load_case(p)


def test_parse_error_has_location(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"mva_base": 100,,}')
    with pytest.raises(CaseError, match="line 1"):
        load_case(p)


def test_round_trip_identity(net14, tmp_path):
    p = tmp_path / "roundtrip.json"
    save_case(net14, p)
    again = load_case(p)
    assert again == net14
    # and a second bounce is byte-stable
    p2 = tmp_path / "roundtrip2.json"
    save_case(again, p2)
    assert p.read_text() == p2.read_text()


def test_candidate_locations_rules(net14):
    cands = candidate_locations(net14)
    targets = set(net14.target_buses)
    assert set(cands) <= targets
    assert cands == candidate_locations(net14)  # deterministic
    # exclusion shrinks the set
    one = net14.candidate_buses[0]
    fewer = candidate_locations(net14, exclude=(one,))
    assert len(fewer) == len(cands) - 1 and one not in fewer


def test_candidate_empty_without_targets(net2):
    # case_2bus excludes its only target bus from candidacy
    assert net2.candidate_buses == ()
    no_targets = dataclasses.replace(
        net2,
        buses=tuple(dataclasses.replace(b, is_target_load=False, v_target=None)
                    for b in net2.buses),
        candidate_exclusions=(),
    )
    assert candidate_locations(no_targets) == ()


def test_validate_two_slack_buses(net2):
    buses = tuple(dataclasses.replace(b, bus_kind="slack") for b in net2.buses)
    bad = dataclasses.replace(net2, buses=buses)
    diags = [d for d in validate(bad) if d.code == "slack_count"]
    assert len(diags) == 1 and diags[0].severity == "error"


def test_validate_generator_q_range(net2):
    gens = (dataclasses.replace(net2.generators[0], q_min=2.0, q_max=-2.0),)
    bad = dataclasses.replace(net2, generators=gens)
    diags = [d for d in validate(bad) if d.code == "bad_q_range"]
    assert len(diags) == 1
    assert net2.generators[0].id in diags[0].message


def test_validate_lists_every_violation(net2):
    gens = (dataclasses.replace(net2.generators[0], q_min=2.0, q_max=-2.0,
                                v_sched=-1.0),)
    bad = dataclasses.replace(net2, generators=gens, mva_base=-5.0)
    codes = {d.code for d in validate(bad)}
    assert {"bad_q_range", "bad_v_sched", "bad_mva_base"} <= codes


def test_catalog_invariants():
    bad_cat = EquipmentCatalog(b_plus_min=0.2, b_plus_max=0.1)
    net = load_case(bundled_case("case_2bus"))
    bad = dataclasses.replace(net, equipment_catalog=bad_cat)
    assert any(d.code == "bad_catalog" for d in validate(bad))


def test_with_bus_shunts_builds_new_network(net2):
    out = net2.with_bus_shunts({"b2": 0.1})
    assert out.bus("b2").shunt_b == pytest.approx(net2.bus("b2").shunt_b + 0.1)
    assert net2.bus("b2").shunt_b == 0.0  # original untouched
