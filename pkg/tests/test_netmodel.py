import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain_doc, line
from dsse.netmodel import (
    DanglingReferenceError, InvariantError, PhaseMismatchError, RadialityError, SchemaError,
    from_dict, parse_network, serialize, to_dict, total_nominal_load, zero_injection_phases,
)


def test_roundtrip_is_canonical(ieee34):
    text = serialize(ieee34)
    again = serialize(parse_network(text))
    assert again == text


def test_compressed_matrices_expand():
    doc = chain_doc(2, phases=("B",))
    net = from_dict(doc)
    z = net.lines[0].series_impedance
    assert z[1, 1] == 0.01 + 0.01j
    assert np.count_nonzero(z) == 1


def test_dangling_line_end():
    doc = chain_doc(3)
    doc["lines"].append(line("B2", "B9"))
    with pytest.raises(DanglingReferenceError):
        from_dict(doc)


def test_cycle_is_rejected():
    doc = chain_doc(4)
    doc["lines"].append(line("B3", "B1"))
    with pytest.raises(RadialityError):
        from_dict(doc)


def test_unreachable_bus():
    doc = chain_doc(3)
    doc["buses"].append({"id": "X", "phases": ["A"], "base_kv": 1.0})
    with pytest.raises(RadialityError):
        from_dict(doc)


def test_schema_error_reports_path():
    doc = chain_doc(2)
    doc["lines"][0]["phases"] = ["D"]
    with pytest.raises(SchemaError) as err:
        from_dict(doc)
    assert "lines" in err.value.path


def test_invalid_json_text():
    with pytest.raises(SchemaError):
        parse_network("{not json")


def test_line_phase_missing_at_end():
    doc = chain_doc(2)
    doc["lines"][0]["phases"] = ["B"]
    with pytest.raises(PhaseMismatchError):
        from_dict(doc)


def test_delta_load_needs_two_phases():
    doc = chain_doc(2, phases=("A", "B", "C"))
    doc["loads"] = [{"bus": "B1", "phases": ["A"], "connection": "delta", "model": "PQ",
                     "kw": [1, 0, 0], "kvar": [0, 0, 0]}]
    with pytest.raises(PhaseMismatchError):
        from_dict(doc)


def test_two_sources_rejected():
    doc = chain_doc(2)
    doc["buses"][1]["is_source"] = True
    with pytest.raises(InvariantError):
        from_dict(doc)


def test_regulator_tap_range():
    doc = chain_doc(2)
    doc["regulators"] = [{"from": "B0", "to": "B1", "taps": [17, 0, 0]}]
    with pytest.raises(InvariantError):
        from_dict(doc)


def test_fixture_shape(ieee34):
    ids = {b.id for b in ieee34.buses}
    assert {"888", "890"} <= ids
    assert len(ieee34.buses) == 34
    assert len(ieee34.branches) == 33
    assert len(ieee34.regulators) == 2
    assert [(t.from_bus, t.to_bus, t.kv_high, t.kv_low) for t in ieee34.transformers] == [("832", "888", 24.9, 4.16)]
    assert sorted(c.bus for c in ieee34.capacitors) == ["844", "848"]


def test_fixture_total_load(ieee34):
    # spot loads 1047 kW + j677 kvar, distributed loads 722 kW + j367 kvar
    spot_kw = 60 + 27 + 405 + 60 + 450 + 45
    spot_kvar = 48 + 21 + 315 + 48 + 225 + 20
    dist_kw = [55, 16, 34, 135, 5, 40, 4, 7, 4, 15, 2, 32, 146, 82, 40, 28, 9, 45, 23]
    dist_kvar = [29, 8, 17, 70, 2, 20, 2, 3, 2, 7, 1, 17, 73, 43, 20, 14, 5, 23, 11]
    expected = complex(spot_kw + sum(dist_kw), spot_kvar + sum(dist_kvar))
    assert expected == 1769 + 1044j
    assert abs(total_nominal_load(ieee34) - expected) < 1e-9


def test_zip_on_chain():
    net = from_dict(chain_doc(3, loads=[("B2", 10.0, 1.0)]))
    assert zero_injection_phases(net) == {("B1", "A")}


def test_zip_empty_when_loaded_everywhere():
    net = from_dict(chain_doc(3, loads=[("B1", 10.0, 1.0), ("B2", 10.0, 1.0)]))
    assert zero_injection_phases(net) == set()


def test_zip_fixture_by_scanning_raw_tables(ieee34):
    raw = json.loads(resources.files("dsse").joinpath("data/ieee34.json").read_text())
    present = {(b["id"], p) for b in raw["buses"] for p in b["phases"]}
    used = {(b["id"], p) for b in raw["buses"] if b.get("is_source") for p in b["phases"]}
    for ld in raw["loads"]:
        if ld["connection"] == "wye":
            used |= {(ld["bus"], p) for p, kw, kv in zip("ABC", ld["kw"], ld["kvar"]) if p in ld["phases"]}
        else:
            for pair, kw, kv in zip(("AB", "BC", "CA"), ld["kw"], ld["kvar"]):
                if set(pair) <= set(ld["phases"]):
                    used |= {(ld["bus"], pair[0]), (ld["bus"], pair[1])}
    for cap in raw["capacitors"]:
        used |= {(cap["bus"], p) for p, k in zip("ABC", cap["kvar"]) if k > 0}
    assert zero_injection_phases(ieee34) == present - used
    assert {("812", p) for p in "ABC"} | {("888", p) for p in "ABC"} <= zero_injection_phases(ieee34)


@st.composite
def random_tree(draw):
    n = draw(st.integers(2, 12))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    mask = {0: "ABC"}
    for i, p in enumerate(parents, start=1):
        up = mask[p]
        k = draw(st.integers(1, len(up)))
        mask[i] = "".join(sorted(draw(st.permutations(list(up)))[:k]))
    doc = {
        "source": {"vmag_pu": [1.0] * 3, "vang_deg": [0.0, -120.0, 120.0]},
        "buses": [{"id": f"N{i}", "phases": list(mask[i]), "base_kv": 12.47, "is_source": i == 0} for i in range(n)],
        "lines": [line(f"N{p}", f"N{i}", (draw(st.floats(0.01, 1.0)), draw(st.floats(0.01, 1.0))), tuple(mask[i]))
                  for i, p in enumerate(parents, start=1)],
    }
    return doc


@given(random_tree())
@settings(max_examples=40, deadline=None)
def test_parse_serialize_parse_idempotent(doc):
    once = serialize(from_dict(doc))
    assert serialize(parse_network(once)) == once


@given(random_tree())
@settings(max_examples=40, deadline=None)
def test_tree_property_and_monotone_phases(doc):
    net = from_dict(doc)
    assert len(net.branches) == len(net.buses) - 1
    for f, t in net.branches:
        assert set(net.branch_phases(f, t)) <= set(net.bus(f).phases)


def test_to_dict_keeps_all_sections(ieee34):
    d = to_dict(ieee34)
    assert set(d) >= {"buses", "lines", "transformers", "regulators", "capacitors", "loads", "source"}
