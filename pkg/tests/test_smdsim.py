import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import chain_doc
from dsse.netmodel import from_dict
from dsse.powerflow import ScenarioSet, SolverOptions, batch_solve, solve
from dsse.smdsim import (
    Channel, GmmErrorModel, Measurements, Mixture, SmdPlacement, TveModel, apply_instrumentation_error, apply_tve,
    error_model_from_dict, extract_true_channels, measure, read_measurements_csv, tve, write_measurements_csv,
)


RAYLEIGH_REF = math.sqrt(-2 * math.log(0.003))


@pytest.fixture(scope="module")
def nominal(ieee34):
    return batch_solve(ieee34, ScenarioSet.nominal(ieee34, 1))


def _channels(n_v, n_i):
    return tuple([Channel(0, "V", "A")] * n_v + [Channel(0, "I", "A")] * n_i)


def test_source_site_reads_source_phasors(ieee34, nominal):
    pl = SmdPlacement.parse(["800-802"])
    z = extract_true_channels(ieee34, nominal, pl)
    v = z.phasors[0, :3]
    src = ieee34.source_vmag * np.exp(1j * np.radians(ieee34.source_vang))
    assert np.allclose(v, src, atol=1e-14)
    assert [c.kind for c in z.channels] == ["V"] * 3 + ["I"] * 3


def test_two_bus_current_channel():
    net = from_dict(chain_doc(2, loads=[("B1", 1000.0, 0.0)], model="I", kv=math.sqrt(3.0), base_mva=3.0))
    res = solve(net, opts=SolverOptions(tolerance=1e-13))
    z = extract_true_channels(net, res, SmdPlacement.parse(["B0-B1"]))
    # unity power factor at the source end: the current leaving B0 has magnitude 1 pu
    assert z.mag[0, 1] == pytest.approx(1.0, abs=1e-9)
    assert abs(z.ang[0, 1] - math.degrees(np.angle(res[0].phasors[1]))) < 1e-9
    # reading the same branch from the far end flips the sign
    zr = extract_true_channels(net, res, SmdPlacement.parse(["B1-B0"]))
    assert np.isclose(zr.phasors[0, 1], -z.phasors[0, 1])


def test_swapping_sites_permutes_features(ieee34, nominal):
    a = extract_true_channels(ieee34, nominal, SmdPlacement.parse(["808-812", "888-890"])).features()
    b = extract_true_channels(ieee34, nominal, SmdPlacement.parse(["888-890", "808-812"])).features()
    assert np.array_equal(a, np.concatenate([b[:, 12:], b[:, :12]], axis=1))


def test_voltage_only_site(ieee34, nominal):
    z = extract_true_channels(ieee34, nominal, SmdPlacement.parse(["890"]))
    assert len(z.channels) == 3 and all(c.kind == "V" for c in z.channels)


def test_placement_validation():
    with pytest.raises(ValueError):
        SmdPlacement.parse(["808-812", "808-812"])


def test_zero_gmm_is_identity(rng):
    z = Measurements(_channels(2, 2), rng.uniform(0.9, 1.1, (5, 4)), rng.uniform(-180, 180, (5, 4)))
    out = apply_instrumentation_error(z, GmmErrorModel.zero(), seed=3)
    assert np.array_equal(out.mag, z.mag) and np.array_equal(out.ang, z.ang)


def test_mixture_mean():
    m = Mixture((0.5, 0.3, 0.2), (-1.0, 0.0, 2.0), (0.0, 0.0, 0.0), 2.0)
    assert m.mean == pytest.approx(-0.1)
    x = m.sample(np.random.default_rng(0), 100_000)
    se = x.std() / math.sqrt(x.size)
    assert abs(x.mean() + 0.1) <= 3 * se


def test_default_bounds_hold():
    g = GmmErrorModel()
    r = np.random.default_rng(5)
    assert np.abs(g.vmag.sample(r, 100_000)).max() <= 0.012
    assert np.abs(g.imag.sample(r, 100_000)).max() <= 0.024


def test_tve_helper():
    assert tve(1.0, 1.01) == pytest.approx(0.01)
    assert tve(1j, 1.01j) == pytest.approx(0.01)


def test_zero_tve_is_identity(rng):
    z = Measurements(_channels(3, 0), rng.uniform(0.9, 1.1, (4, 3)), rng.uniform(-180, 180, (4, 3)))
    out = apply_tve(z, TveModel(0.0), seed=1)
    assert np.array_equal(out.mag, z.mag) and np.array_equal(out.ang, z.ang)


def test_tve_percentile():
    z = Measurements(_channels(1, 0), np.ones((100_000, 1)), np.zeros((100_000, 1)))
    out = apply_tve(z, TveModel(0.01), seed=0)
    p = np.percentile(tve(z.phasors[:, 0], out.phasors[:, 0]), 99.7)
    assert 0.009 <= p <= 0.011


def test_component_sigma_rule_overshoots():
    # 3 sigma per rectangular component puts the 99.7th percentile of the radius near 1.136 %
    z = Measurements(_channels(1, 0), np.ones((100_000, 1)), np.zeros((100_000, 1)))
    out = apply_tve(z, TveModel(0.01, "component"), seed=0)
    p = np.percentile(tve(1.0, out.phasors[:, 0]), 99.7)
    assert p == pytest.approx(0.01 * RAYLEIGH_REF / 3, rel=0.03)


def test_zero_magnitude_flagged():
    z = Measurements(_channels(2, 0), np.array([[0.0, 1.0]]), np.zeros((1, 2)))
    out = apply_tve(z, TveModel(0.01))
    assert out.mag[0, 0] == 0.0 and out.flagged.tolist() == [[True, False]]


def test_measure_exact_without_noise(ieee34, nominal):
    pl = SmdPlacement.parse(["808-812"])
    a = extract_true_channels(ieee34, nominal, pl)
    b = measure(ieee34, nominal, pl, None, TveModel(0.0))
    assert np.array_equal(a.mag, b.mag) and np.array_equal(a.ang, b.ang)


def test_measure_deterministic(ieee34, nominal):
    pl = SmdPlacement.parse(["808-812", "888-890"])
    a = measure(ieee34, nominal, pl, GmmErrorModel(), TveModel(), seed=7)
    b = measure(ieee34, nominal, pl, GmmErrorModel(), TveModel(), seed=7)
    c = measure(ieee34, nominal, pl, GmmErrorModel(), TveModel(), seed=8)
    assert np.array_equal(a.features(), b.features())
    assert not np.array_equal(a.features(), c.features())


@pytest.fixture(scope="module")
def repeated(ieee34, nominal):
    """The nominal state measured 10^4 times with the default two-level model."""
    pl = SmdPlacement.parse(["808-812"])
    n = 10_000
    true = extract_true_channels(ieee34, nominal, pl)
    z = Measurements(true.channels, np.repeat(true.mag, n, 0), np.repeat(true.ang, n, 0))
    return true, apply_tve(apply_instrumentation_error(z, GmmErrorModel(), seed=2), TveModel(), seed=3)


def test_composed_magnitude_bound(repeated):
    true, z = repeated
    v = [i for i, c in enumerate(z.channels) if c.kind == "V"]
    rel = np.abs(z.mag[:, v] / true.mag[0, v] - 1)
    assert rel.max() <= 0.012 + 4 * 0.01 / 3


def test_errors_uncorrelated_across_scenarios(repeated):
    true, z = repeated
    e = z.mag[:, 0] - true.mag[0, 0]
    r = np.corrcoef(e[:-1], e[1:])[0, 1]
    assert abs(r) <= 3 / math.sqrt(len(e) - 1)


def test_tve_only_components_are_gaussian(ieee34, nominal):
    pl = SmdPlacement.parse(["808"])
    n = 10_000
    true = extract_true_channels(ieee34, nominal, pl)
    z = Measurements(true.channels, np.repeat(true.mag, n, 0), np.repeat(true.ang, n, 0))
    out = apply_tve(z, TveModel(0.01), seed=4)
    d = out.phasors[:, 0] - true.phasors[0, 0]
    assert stats.normaltest(d.real).pvalue > 0.01
    assert stats.normaltest(d.imag).pvalue > 0.01


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_scenario_slot_is_stable(seed):
    # scenario k drawn alone equals scenario k drawn in a batch
    z = Measurements(_channels(2, 1), np.ones((6, 3)), np.zeros((6, 3)))
    full = apply_tve(apply_instrumentation_error(z, GmmErrorModel(), seed), TveModel(), seed)
    one = z.replace(z.mag[4:5], z.ang[4:5])
    part = apply_tve(apply_instrumentation_error(one, GmmErrorModel(), seed, [4]), TveModel(), seed, [4])
    assert np.array_equal(full.mag[4], part.mag[0])


def test_error_model_config():
    gmm, t = error_model_from_dict({"level1_gmm": None, "level2_tve": {"tve_limit": 0.005}})
    assert gmm is None and t.tve_limit == 0.005
    gmm, t = error_model_from_dict(None)
    assert gmm == GmmErrorModel() and t == TveModel()


def test_measurements_csv_roundtrip(tmp_path, ieee34, nominal):
    pl = SmdPlacement.parse(["808-812", "890"])
    z = measure(ieee34, nominal, pl, GmmErrorModel(), TveModel(), seed=1)
    write_measurements_csv(tmp_path / "m.csv", pl, z)
    ids, back = read_measurements_csv(tmp_path / "m.csv", ieee34, pl)
    assert ids == ["0"]
    assert np.array_equal(back.mag, z.mag) and np.array_equal(back.ang, z.ang)
