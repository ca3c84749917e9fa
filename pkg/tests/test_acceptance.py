"""Acceptance gate: one test per criterion, one summary line per criterion.

Scale is chosen by ``DSSE_ACCEPTANCE_SCALE``: ``full`` (default; 10,000
training scenarios, 200 epochs, about an hour on one core) or ``ci``
(2,500 scenarios, 50 epochs).  The comparative criteria 4, 5 and 7 are
stated for full-scale training and are skipped at CI scale.
"""
import csv
import math
import os
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from dsse import dnn
from dsse.experiment import DnnRun, ExperimentConfig, fig5_study, load_config, prepare_data, run_experiment
from dsse.loadgen import fit_kde, gaussian_variation, sample_scenarios
from dsse.lse import build_linear_model, bus_coverage_placement, check_observability, wls_solve
from dsse.placement import recommend_placement
from dsse.powerflow import SolverOptions, batch_solve, power_mismatch, solve
from dsse.smdsim import Measurements, Channel, TveModel, apply_tve, extract_true_channels, tve

SCALE = os.environ.get("DSSE_ACCEPTANCE_SCALE", "full")
FULL = SCALE == "full"
ROOT = Path(__file__).resolve().parents[1]

RESULTS: dict[int, list[tuple[bool, str]]] = {}
TITLES = {
    1: "power flow matches published IEEE 34 solution",
    2: "phase-A angle clusters: {888, 890} split off",
    3: "DNN accuracy, 2 SMDs, two-level error",
    4: "placement ordering across the four cases",
    5: "noise robustness, GMM vs TVE-only",
    6: "WLS baseline band",
    7: "DNN beats WLS with far fewer SMDs",
    8: "prediction throughput",
    9: "property suites",
}


def check(n: int, ok: bool, detail: str):
    RESULTS.setdefault(n, []).append((bool(ok), detail))
    assert ok, detail


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"acceptance summary (scale: {SCALE})"]
    for n, title in TITLES.items():
        parts = RESULTS.get(n)
        if not parts:
            status, detail = "NOT RUN", ""
        else:
            status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
            detail = "; ".join(d for _, d in parts)
        lines.append(f"criterion {n} [{status}] {title}: {detail}")
    for line in lines:
        if tr is not None:
            tr.write_line(line)
        print(line)


def _config() -> ExperimentConfig:
    cfg = load_config(ROOT / "experiments" / "table2.toml")
    if not FULL:
        cfg = replace(cfg, n_train=2_500, train=replace(cfg.train, epochs=50))
    return cfg


@pytest.fixture(scope="module")
def cfg():
    return _config()


@pytest.fixture(scope="module")
def data(cfg):
    return prepare_data(cfg)


@pytest.fixture(scope="module")
def table2(cfg, data, tmp_path_factory):
    return run_experiment(cfg, tmp_path_factory.mktemp("table2"), data)


@pytest.fixture(scope="module")
def fig5(cfg, data, table2, tmp_path_factory):
    first = table2.outcomes["DNN"]
    cache = {tuple(s.label for s in first.placement.sites): first}
    return fig5_study(cfg, tmp_path_factory.mktemp("fig5"), data, cache=cache)


def _report(res, tag):
    return next(r for r in res.reports if r.method == tag)


# -- 1 ----------------------------------------------------------------------------------

def test_criterion_1_power_flow_fidelity(ieee34):
    t0 = time.perf_counter()
    sv, _ = solve(ieee34)
    dt = time.perf_counter() - t0
    pub = {}
    with resources.files("dsse").joinpath("data/ieee34_solution.csv").open() as fh:
        for r in csv.DictReader(fh):
            pub[(r["bus"], r["phase"])] = (float(r["vmag_pu"]), float(r["vang_deg"]))
    dm = max(abs(m - pub[l][0]) for l, m in zip(sv.labels, sv.vmag))
    da = max(abs(a - pub[l][1]) for l, a in zip(sv.labels, sv.vang))
    check(1, set(pub) == set(sv.labels) and dm <= 0.005 and da <= 0.5 and dt < 1.0,
          f"max |dV| {dm:.4f} pu, max |dang| {da:.3f} deg, {dt:.3f} s")


# -- 2 ----------------------------------------------------------------------------------

def test_criterion_2_cluster_reproduction(ieee34):
    t0 = time.perf_counter()
    ss = sample_scenarios(gaussian_variation(ieee34), None, 12_500, seed=0)
    res = batch_solve(ieee34, ss)
    with pytest.warns(UserWarning):
        plan = recommend_placement(ieee34, res.vang, threshold=0.9)
    dt = time.perf_counter() - t0
    small = min(plan.clusters, key=len)
    want = {l for l in plan.labels if l[0] in ("888", "890")}
    check(2, len(plan.clusters) == 2 and set(small) == want and dt < 60,
          f"{len(plan.clusters)} clusters, small = {sorted(b + '.' + p for b, p in small)}, {dt:.1f} s")


# -- 3, 5, 6, 7, 8 --------------------------------------------------------------------------

def test_criterion_3_dnn_accuracy(table2):
    r = _report(table2, "DNN")
    secs = table2.outcomes["DNN"].train_seconds
    if FULL:
        ok = r.phase_mae <= 0.20 and r.magnitude_mape <= 0.40 and secs <= 30 * 60
        bound = "MAE <= 0.20, MAPE <= 0.40 %, <= 30 min"
    else:
        ok = r.phase_mae <= 0.5
        bound = "MAE <= 0.5 (ci)"
    check(3, ok and r.n_smd == 2 and "GMM" in r.error_model,
          f"MAE {r.phase_mae:.4f} deg, MAPE {r.magnitude_mape:.4f} %, train {secs / 60:.1f} min ({bound})")


@pytest.mark.skipif(not FULL, reason="stated for full-scale training")
def test_criterion_5_noise_robustness(table2):
    a, b = _report(table2, "DNN"), _report(table2, "DNN-TVE")
    d = abs(a.phase_mae - b.phase_mae)
    check(5, d <= 0.05, f"GMM {a.phase_mae:.4f} vs TVE-only {b.phase_mae:.4f} deg, diff {d:.4f}")


def test_criterion_6_lse_baseline(table2, data):
    r = _report(table2, "LSE")
    obs = check_observability(build_linear_model(data.net, bus_coverage_placement(data.net)))
    check(6, obs.full_rank and r.n_smd >= 26 and "GMM" not in r.error_model
          and 0.05 <= r.phase_mae <= 0.30 and 0.1 <= r.magnitude_mape <= 0.5,
          f"{r.n_smd} SMDs, MAE {r.phase_mae:.4f} deg, MAPE {r.magnitude_mape:.4f} %")


@pytest.mark.skipif(not FULL, reason="stated for full-scale training")
def test_criterion_7_dnn_beats_lse(table2):
    d, l_ = _report(table2, "DNN"), _report(table2, "LSE")
    check(7, d.n_smd <= 2 and l_.n_smd >= 26 and d.phase_mae < l_.phase_mae and d.magnitude_mape < l_.magnitude_mape,
          f"DNN ({d.n_smd} SMDs) {d.phase_mae:.4f} deg / {d.magnitude_mape:.4f} %, "
          f"LSE ({l_.n_smd} SMDs) {l_.phase_mae:.4f} deg / {l_.magnitude_mape:.4f} %")


def test_criterion_8_throughput(table2, data):
    model = table2.outcomes["DNN"].model
    z = np.random.default_rng(0).normal(1.0, 0.01, (200, model.layer_sizes[0]))
    t0 = time.perf_counter()
    for row in z:  # one estimate per call, as in a streaming deployment
        dnn.predict(model, row[None])
    rate = len(z) / (time.perf_counter() - t0)
    check(8, rate >= 30, f"{rate:.0f} estimates/s, model {model.layer_sizes}")


# -- 4 ------------------------------------------------------------------------------------

@pytest.mark.skipif(not FULL, reason="stated for full-scale training")
def test_criterion_4_placement_ordering(fig5):
    r = {k: rep for k, rep in zip("abcd", fig5.reports)}
    lat_b, lat_c = r["b"].mae_on(["888", "890"]), r["c"].mae_on(["888", "890"])
    ok = r["c"].phase_mae < r["b"].phase_mae and r["c"].phase_mae < r["a"].phase_mae and lat_b >= 2 * lat_c
    check(4, ok, "MAE a {:.4f}, b {:.4f}, c {:.4f}, d {:.4f} deg; on 888/890 b {:.4f} vs c {:.4f}".format(
        r["a"].phase_mae, r["b"].phase_mae, r["c"].phase_mae, r["d"].phase_mae, lat_b, lat_c))


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_9_gradient_check():
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        m = dnn.init_model(2, 2, seed=seed, hidden=(3,), dtype="float64")
        for b in m.b:
            b[:] = r.standard_normal(b.shape) * 0.5
        z, x = r.standard_normal((6, 2)), r.standard_normal((6, 2))
        _, grads = dnn.mse_gradient(m, z, x)
        for p, g in zip(m.params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-5
                lp, _ = dnn.mse_gradient(m, z, x)
                p[idx] = old - 1e-5
                lm, _ = dnn.mse_gradient(m, z, x)
                p[idx] = old
                fd = (lp - lm) / 2e-5
                worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(fd)))
    check(9, worst <= 1e-4, f"gradient rel. err {worst:.1e}")


def test_criterion_9_wls_recovery(ieee34):
    ss = sample_scenarios(gaussian_variation(ieee34), None, 10, seed=21)
    res = batch_solve(ieee34, ss, SolverOptions(tolerance=1e-12, max_iterations=500))
    pl = bus_coverage_placement(ieee34)
    est = wls_solve(build_linear_model(ieee34, pl), extract_true_channels(ieee34, res, pl))
    err = np.max(np.abs(est.v - res.phasors) / np.abs(res.phasors))
    check(9, err <= 1e-8, f"WLS noiseless rel. err {err:.1e}")


def test_criterion_9_tve_percentile():
    z = Measurements((Channel(0, "V", "A"),), np.ones((100_000, 1)), np.zeros((100_000, 1)))
    out = apply_tve(z, TveModel(0.01), seed=0)
    p = np.percentile(tve(1.0, out.phasors[:, 0]), 99.7)
    check(9, 0.009 <= p <= 0.011, f"TVE p99.7 {100 * p:.3f} %")


def test_criterion_9_kde_interval():
    x = np.random.default_rng(0).gamma(3.0, 10.0, 5_000)
    lo, hi = fit_kde(x, 0.95).interval(0.95)
    elo, ehi = np.percentile(x, [2.5, 97.5])
    rel = abs((hi - lo) / (ehi - elo) - 1)
    check(9, rel <= 0.01, f"KDE 95 % width off by {100 * rel:.2f} %")


def test_criterion_9_power_balance(ieee34):
    ss = sample_scenarios(gaussian_variation(ieee34), None, 5, seed=3)
    opts = SolverOptions()
    res = batch_solve(ieee34, ss, opts)
    worst = max(np.abs(power_mismatch(ieee34, res.v[i], ss, i)).max() for i in range(len(ss)))
    check(9, worst <= 10 * opts.tolerance, f"power mismatch {worst:.1e} pu")


def test_criterion_9_byte_identical_reruns(tmp_path):
    cfg = replace(_config(), n_train=200, n_test=50, train=replace(_config().train, epochs=2, hidden=(32, 32)))
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    same = all(a.files[k].read_bytes() == b.files[k].read_bytes() for k in a.files)
    check(9, same, f"reruns identical over {len(a.files)} files")
