import numpy as np
import pytest

from dsse.netmodel import from_dict, load_ieee34_fixture


def line(f, t, z=(0.01, 0.01), phases=("A",), y=None):
    doc = {"from": f, "to": t, "phases": list(phases),
           "z": [[list(z) if i == j else [0.0, 0.0] for j in range(len(phases))] for i in range(len(phases))]}
    if y is not None:
        doc["y"] = y
    return doc


def chain_doc(n=3, phases=("A",), loads=None, model="PQ", z=(0.01, 0.01), kv=1.0, base_mva=1.0):
    """Single-feeder chain B0-B1-...; impedances given in per unit when kv=1, base_mva=1."""
    ids = [f"B{i}" for i in range(n)]
    doc = {
        "base_mva": base_mva,
        "source": {"vmag_pu": [1.0, 1.0, 1.0], "vang_deg": [0.0, -120.0, 120.0]},
        "buses": [{"id": b, "phases": list(phases), "base_kv": kv, "is_source": i == 0} for i, b in enumerate(ids)],
        "lines": [line(a, b, z, phases) for a, b in zip(ids[:-1], ids[1:])],
        "loads": [],
    }
    for bus, kw, kvar in (loads or []):
        doc["loads"].append({"bus": bus, "phases": list(phases), "connection": "wye", "model": model,
                             "kw": [kw if p in phases else 0.0 for p in "ABC"],
                             "kvar": [kvar if p in phases else 0.0 for p in "ABC"]})
    return doc


@pytest.fixture(scope="session")
def ieee34():
    return load_ieee34_fixture()


@pytest.fixture
def chain3():
    # loads at every non-source bus; single phase
    return from_dict(chain_doc(3, loads=[("B1", 100.0, 50.0), ("B2", 100.0, 50.0)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
