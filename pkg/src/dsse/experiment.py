"""End-to-end studies: generate, solve, place, measure, train, evaluate.

An experiment is described by a TOML file (see ``experiments/table2.toml``).
Training and test scenarios are consecutive index ranges of one seeded load
stream, so they never share a substream.
"""
from __future__ import annotations

import contextlib
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import dnn, lse, metrics
from .dnn import TrainConfig
from .loadgen import (
    PowerFactorRange, aggregate_to_transformer, gaussian_variation, kde_distribution,
    read_meter_csv, sample_scenarios, transformer_key,
)
from .netmodel import NetworkModel, load_ieee34_fixture, load_network, network_hash
from .placement import recommend_placement, spearman_matrix, state_features, heatmap_svg
from .powerflow import NOMINAL_ANGLES, BatchResult, SolverOptions, batch_solve
from .smdsim import GmmErrorModel, SmdPlacement, TveModel, error_model_from_dict, measure, save_placement

log = logging.getLogger(__name__)

FIG5_CASES = {
    "a": ("808-812",),
    "b": ("808-812", "830-854"),
    "c": ("808-812", "888-890"),
    "d": ("888-890",),
}
PLACEMENT_SOURCES = ("explicit", "recommend", "greedy-full", "bus-coverage")


@contextlib.contextmanager
def stage(name: str):
    """Tag exceptions escaping a pipeline stage with the stage name."""
    try:
        yield
    except Exception as e:
        if not hasattr(e, "stage"):
            e.stage = name
        raise


# -- configuration -------------------------------------------------------------------

@dataclass
class PlacementSpec:
    source: str = "explicit"
    sites: tuple[str, ...] = ()
    threshold: float = 0.9
    k: int | None = None
    use_zip: bool = True

    def __post_init__(self):
        self.sites = tuple(self.sites)
        if self.source not in PLACEMENT_SOURCES:
            raise ValueError(f"placement source must be one of {PLACEMENT_SOURCES}")
        if self.source == "explicit" and not self.sites:
            raise ValueError("explicit placement needs a non-empty 'sites' list")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class DnnRun:
    tag: str
    error_model: dict = field(default_factory=dict)
    method: str = "dnn"  # or "oracle": returns the true state, for plumbing checks

    def __post_init__(self):
        if self.method not in ("dnn", "oracle"):
            raise ValueError("method must be 'dnn' or 'oracle'")
        error_model_from_dict(self.error_model)  # validate early


@dataclass
class LseRun:
    tag: str = "LSE"
    placement: PlacementSpec = field(default_factory=lambda: PlacementSpec("bus-coverage"))
    error_model: dict = field(default_factory=lambda: {"level1_gmm": "none"})
    use_zip: bool = True


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    network: str = "ieee34"
    load_mode: str = "gaussian"
    load_fraction: float = 0.5
    power_factor: tuple[float, float] | None = None  # None keeps the nominal Q/P
    meters: str | None = None
    n_train: int = 10_000
    n_test: int = 2_500
    seed: int = 0
    placement: PlacementSpec = field(default_factory=lambda: PlacementSpec("explicit", ("808-812", "888-890")))
    dnn: list[DnnRun] = field(default_factory=lambda: [DnnRun("DNN")])
    lse: LseRun | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.load_mode not in ("gaussian", "kde"):
            raise ValueError("loads.mode must be 'gaussian' or 'kde'")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("sample counts must be positive")
        if self.network != "ieee34" and not Path(self.network).exists():
            raise FileNotFoundError(f"network file not found: {self.network}")
        if self.load_mode == "kde" and (self.meters is None or not Path(self.meters).exists()):
            raise FileNotFoundError(f"kde mode needs an existing meters CSV, got {self.meters!r}")
        tags = [d.tag for d in self.dnn] + ([self.lse.tag] if self.lse else [])
        if len(set(tags)) != len(tags):
            raise ValueError("method tags must be unique")

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "ExperimentConfig":
        doc = dict(doc)
        base = Path(".") if base is None else base

        def rel(p):
            if p is None or p == "ieee34" or os.path.isabs(p):
                return p
            return str(base / p)

        loads = doc.pop("loads", {})
        samples = doc.pop("samples", {})
        pf = loads.get("power_factor", "nominal")
        kw = dict(
            name=doc.pop("name", "experiment"),
            network=rel(doc.pop("network", "ieee34")),
            load_mode=loads.get("mode", "gaussian"),
            load_fraction=float(loads.get("fraction", 0.5)),
            power_factor=None if pf == "nominal" else tuple(float(v) for v in pf),
            meters=rel(loads.get("meters")),
            n_train=int(samples.get("train", 10_000)),
            n_test=int(samples.get("test", 2_500)),
            seed=int(doc.pop("seed", 0)),
            out_dir=doc.pop("out_dir", "runs/experiment"),
        )
        if "placement" in doc:
            kw["placement"] = PlacementSpec(**doc.pop("placement"))
        if "dnn" in doc:
            kw["dnn"] = [DnnRun(**d) for d in doc.pop("dnn")]
        if "lse" in doc:
            d = dict(doc.pop("lse"))
            if "placement" in d:
                d["placement"] = PlacementSpec(**d["placement"])
            kw["lse"] = LseRun(**d)
        if "train" in doc:
            kw["train"] = TrainConfig.from_dict(doc.pop("train"))
        if doc:
            raise ValueError(f"unknown experiment keys: {sorted(doc)}")
        return cls(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return ExperimentConfig.from_dict(doc, path.parent)


def error_model_tag(gmm: GmmErrorModel | None, tve: TveModel) -> str:
    t = f"{100 * tve.tve_limit:g}% Gaussian TVE"
    return t if gmm is None else f"two-level GMM + {t}"


# -- data ------------------------------------------------------------------------

@dataclass
class ExperimentData:
    net: NetworkModel
    train: BatchResult
    test: BatchResult
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    @property
    def labels(self):
        return self.net.phase_labels


def load_net(spec: str) -> NetworkModel:
    return load_ieee34_fixture() if spec == "ieee34" else load_network(spec)


def _distribution(cfg: ExperimentConfig, net: NetworkModel):
    if cfg.load_mode == "gaussian":
        return gaussian_variation(net, cfg.load_fraction)
    series = read_meter_csv(cfg.meters)
    power = {transformer_key(t): p for t, p in aggregate_to_transformer(series).items()}
    return kde_distribution(net, power)


def prepare_data(cfg: ExperimentConfig, net: NetworkModel | None = None) -> ExperimentData:
    """Sample and solve the training range [0, n_train) and the test range
    [n_train, n_train + n_test) of the load stream."""
    net = net or load_net(cfg.network)
    with stage("generate"):
        dist = _distribution(cfg, net)
        pf = None if cfg.power_factor is None else PowerFactorRange(*cfg.power_factor)
        s_tr = sample_scenarios(dist, pf, cfg.n_train, cfg.seed, start=0)
        s_te = sample_scenarios(dist, pf, cfg.n_test, cfg.seed, start=cfg.n_train)
        assert not set(s_tr.seeds) & set(s_te.seeds), "train/test scenario streams overlap"
    with stage("powerflow"):
        r_tr = batch_solve(net, s_tr, SolverOptions())
        r_te = batch_solve(net, s_te, SolverOptions())
    return ExperimentData(net, r_tr, r_te, np.arange(cfg.n_train), cfg.n_train + np.arange(cfg.n_test), cfg.seed)


def resolve_placement(spec: PlacementSpec, data: ExperimentData):
    """Returns (placement, plan or None)."""
    with stage("place"):
        if spec.source == "explicit":
            return SmdPlacement.parse(spec.sites), None
        if spec.source == "bus-coverage":
            return lse.bus_coverage_placement(data.net), None
        if spec.source == "greedy-full":
            return lse.greedy_observability_placement(data.net, spec.use_zip), None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            plan = recommend_placement(data.net, data.train.vang, spec.threshold, spec.k, spec.use_zip)
        return plan.placement, plan


def masks(net: NetworkModel, n_features: int):
    """Angle masks and nominal references for (features, states)."""
    P = len(net.phase_labels)
    inm = np.zeros(n_features, bool)
    inm[1::2] = True
    outm = np.zeros(2 * P, bool)
    outm[P:] = True
    ref = np.zeros(2 * P)
    ref[P:] = [NOMINAL_ANGLES["ABC".index(p)] for _, p in net.phase_labels]
    return inm, outm, ref


def state_labels(net: NetworkModel) -> list[str]:
    return [f"{b}.{p}.{q}" for q in ("mag", "ang") for b, p in net.phase_labels]


@dataclass
class DnnOutcome:
    report: metrics.MetricsReport
    model: dnn.MlpModel | None
    history: dnn.TrainHistory | None
    placement: SmdPlacement
    train_seconds: float = 0.0


def run_dnn(data: ExperimentData, placement: SmdPlacement, run: DnnRun, train_cfg: TrainConfig,
            progress: bool = False) -> DnnOutcome:
    net = data.net
    gmm, tve = error_model_from_dict(run.error_model)
    x_te = data.test.states()
    P = len(net.phase_labels)
    if run.method == "oracle":
        xh = x_te.copy()
        model = hist = None
        secs = 0.0
    else:
        with stage("measure"):
            z_tr = measure(net, data.train, placement, gmm, tve, data.seed, data.train_idx).features()
            z_te = measure(net, data.test, placement, gmm, tve, data.seed, data.test_idx).features()
        inm, outm, ref = masks(net, z_tr.shape[1])
        meta = {"network_hash": network_hash(net), "placement": [s.label for s in placement.sites],
                "error_model": error_model_tag(gmm, tve), "state_labels": state_labels(net)}
        t0 = time.perf_counter()
        with stage("train"):
            model, hist = dnn.train(z_tr, data.train.states(), train_cfg, inm, outm, ref,
                                    out_labels=state_labels(net), meta=meta, progress=progress)
        secs = time.perf_counter() - t0
        with stage("estimate"):
            xh = dnn.predict(model, z_te)
    with stage("evaluate"):
        rep = metrics.evaluate(run.tag, error_model_tag(gmm, tve), len(placement), net.phase_labels,
                               x_te[:, :P], x_te[:, P:], xh[:, :P], xh[:, P:])
    return DnnOutcome(rep, model, hist, placement, secs)


def run_lse(data: ExperimentData, run: LseRun) -> tuple[metrics.MetricsReport, SmdPlacement, lse.ObservabilityReport]:
    net = data.net
    placement, _ = resolve_placement(run.placement, data)
    gmm, tve = error_model_from_dict(run.error_model)
    with stage("measure"):
        z = measure(net, data.test, placement, gmm, tve, data.seed, data.test_idx)
    with stage("lse"):
        model = lse.build_linear_model(net, placement, tve, use_zip=run.use_zip)
        obs = lse.check_observability(model)
        est = lse.wls_solve(model, z)
    with stage("evaluate"):
        rep = metrics.evaluate(run.tag, error_model_tag(gmm, tve), len(placement), net.phase_labels,
                               data.test.vmag, data.test.vang, est.vmag, est.vang)
    return rep, placement, obs


def angle_heatmap(data: ExperimentData, title: str = "Spearman correlation, phase A angles") -> str:
    labels, vals = state_features(data.net, data.train.vang, "A")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        corr = spearman_matrix(vals, labels)
    return heatmap_svg(corr, title=title)


@dataclass
class ExperimentResult:
    reports: list[metrics.MetricsReport]
    outcomes: dict[str, DnnOutcome]
    files: dict[str, Path]


def run_experiment(cfg: ExperimentConfig, out_dir=None, data: ExperimentData | None = None,
                   progress: bool = False) -> ExperimentResult:
    """Run every DNN row and the optional LSE row; write reports and artifacts."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or prepare_data(cfg)
    placement, plan = resolve_placement(cfg.placement, data)
    files = {}
    if plan is not None:
        files["plan"] = out / "plan.json"
        plan.save(files["plan"])
    else:
        files["placement"] = out / "placement.json"
        save_placement(files["placement"], placement)
    files["heatmap"] = out / "corr_heatmap.svg"
    files["heatmap"].write_text(angle_heatmap(data))

    reports, outcomes = [], {}
    for run in cfg.dnn:
        log.info("%s: %s on %s", cfg.name, run.tag, [s.label for s in placement.sites])
        oc = run_dnn(data, placement, run, cfg.train, progress)
        outcomes[run.tag] = oc
        reports.append(oc.report)
        if oc.model is not None:
            files[f"model:{run.tag}"] = out / f"model_{_slug(run.tag)}.json"
            dnn.save_model(files[f"model:{run.tag}"], oc.model)
    if cfg.lse is not None:
        rep, _, obs = run_lse(data, cfg.lse)
        reports.append(rep)
    files["report"] = out / "report.csv"
    files["features"] = out / "features.csv"
    files["mae_plot"] = out / "mae.svg"
    metrics.write_report_csv(files["report"], reports)
    metrics.write_feature_csv(files["features"], reports)
    files["mae_plot"].write_text(metrics.mae_svg(reports))
    return ExperimentResult(reports, outcomes, files)


def fig5_study(cfg: ExperimentConfig, out_dir=None, data: ExperimentData | None = None,
               cases: dict[str, Sequence[str]] | None = None, run: DnnRun | None = None,
               cache: dict | None = None, progress: bool = False) -> ExperimentResult:
    """Same data, seeds and training, four placements.  ``cache`` maps a
    placement tuple to an earlier DnnOutcome for the same run and config."""
    cases = cases or FIG5_CASES
    run = run or cfg.dnn[0]
    data = data or prepare_data(cfg)
    cache = {} if cache is None else cache
    outcomes, reports = {}, []
    for key, sites in cases.items():
        sites = tuple(sites)
        if sites not in cache:
            log.info("fig5 case %s: %s", key, sites)
            cache[sites] = run_dnn(data, SmdPlacement.parse(sites), run, cfg.train, progress)
        oc = cache[sites]
        rep = metrics.MetricsReport(f"case {key} ({', '.join(sites)})", oc.report.error_model, oc.report.n_smd,
                                    oc.report.n_scenarios, oc.report.labels, oc.report.mae_per_feature,
                                    oc.report.mape_per_feature)
        outcomes[key] = oc
        reports.append(rep)
    files = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"report": out / "fig5_report.csv", "features": out / "fig5_features.csv",
                 "mae_plot": out / "fig5_mae.svg"}
        metrics.write_report_csv(files["report"], reports)
        metrics.write_feature_csv(files["features"], reports)
        files["mae_plot"].write_text(metrics.mae_svg(reports, [r.method for r in reports]))
    return ExperimentResult(reports, outcomes, files)


def _slug(tag: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in tag).strip("_").lower() or "model"
