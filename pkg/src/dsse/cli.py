"""Command line entry point: ``dsse <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dnn, experiment, lse, metrics
from .experiment import load_net, masks, state_labels, tomllib
from .loadgen import (
    PowerFactorRange, aggregate_to_transformer, gaussian_variation, kde_distribution, read_meter_csv,
    sample_scenarios, transformer_key, write_scenarios_csv,
)
from .netmodel import network_hash
from .placement import heatmap_svg, recommend_placement, spearman_matrix, state_features
from .powerflow import PowerFlowError, batch_solve, read_states_csv, write_flows_csv, write_state_table, \
    write_states_csv
from .smdsim import SmdPlacement, error_model_from_dict, measure, read_measurements_csv, write_measurements_csv

log = logging.getLogger("dsse")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _placement(arg: str, net=None) -> SmdPlacement:
    """A JSON file holding ``sites``, a comma-separated label list, or
    ``bus-coverage`` (one voltage-only SMD per bus)."""
    if arg == "bus-coverage":
        return lse.bus_coverage_placement(net)
    p = Path(arg)
    if p.suffix == ".json":
        with open(p) as fh:
            return SmdPlacement.from_dict(json.load(fh))
    return SmdPlacement.parse([s.strip() for s in arg.split(",") if s.strip()])


def _sites_in_csv(path) -> SmdPlacement:
    seen = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["site"] not in seen:
                seen.append(r["site"])
    return SmdPlacement.parse(seen)


def _error_model(kind: str, tve_limit: float):
    doc = {"level1_gmm": "default" if kind == "gmm" else "none", "level2_tve": {"tve_limit": tve_limit}}
    return error_model_from_dict(doc)


def _out(args, name: str, given=None) -> Path:
    path = Path(given) if given else Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _aligned_states(net, states_path, ids):
    sid, vm, va = read_states_csv(states_path, net)
    pos = {s: i for i, s in enumerate(sid)}
    missing = [s for s in ids if s not in pos]
    if missing:
        raise ValueError(f"{states_path}: no states for scenarios {missing[:5]}")
    idx = [pos[s] for s in ids]
    return vm[idx], va[idx]


# -- commands ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    net = load_net(args.net)
    seed = _seed(args)
    if args.mode == "gaussian":
        dist = gaussian_variation(net, args.fraction)
        pf = None if args.pf == "nominal" else PowerFactorRange(*map(float, args.pf.split(",")))
    else:
        if not args.meters:
            raise ValueError("--mode kde needs --meters")
        series = read_meter_csv(args.meters)
        dist = kde_distribution(net, {transformer_key(t): p for t, p in aggregate_to_transformer(series).items()})
        pf = PowerFactorRange() if args.pf == "nominal" else PowerFactorRange(*map(float, args.pf.split(",")))
    sset = sample_scenarios(dist, pf, args.n, seed, start=args.start)
    ids = list(range(args.start, args.start + args.n))
    res = batch_solve(net, sset)
    write_scenarios_csv(_out(args, "scenarios.csv"), sset, ids)
    write_states_csv(_out(args, "states.csv"), net, res, ids)
    write_flows_csv(_out(args, "flows.csv"), net, res, ids)
    if args.placement:
        pl = _placement(args.placement, net)
        gmm, tve = _error_model(args.error_model, args.tve_limit)
        z = measure(net, res, pl, gmm, tve, seed, ids)
        write_measurements_csv(_out(args, "measurements.csv"), pl, z, ids)
    log.info("generated %d scenarios in %s", args.n, args.out_dir)
    return EXIT_OK


def cmd_select(args) -> int:
    net = load_net(args.net)
    _, _, va = read_states_csv(args.states, net)
    plan = recommend_placement(net, va, args.threshold, args.k)
    plan.save(_out(args, "plan.json", args.out))
    labels, vals = state_features(net, va, "A")
    corr = spearman_matrix(vals, labels)
    _out(args, "corr_heatmap.svg", args.heatmap).write_text(heatmap_svg(corr, title="phase A angles"))
    print(" ".join(s.label for s in plan.placement.sites))
    return EXIT_OK


def _train_config(args) -> dnn.TrainConfig:
    doc = {}
    if args.config:
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
        doc = doc.get("train", doc)
    cfg = dnn.TrainConfig.from_dict(doc)
    if args.epochs:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    net = load_net(args.net)
    pl = _sites_in_csv(args.measurements)
    ids, z = read_measurements_csv(args.measurements, net, pl)
    vm, va = _aligned_states(net, args.states, ids)
    cfg = _train_config(args)
    feats = z.features()
    inm, outm, ref = masks(net, feats.shape[1])
    meta = {"network_hash": network_hash(net), "placement": [s.label for s in pl.sites],
            "state_labels": state_labels(net)}
    model, hist = dnn.train(feats, np.hstack([vm, va]), cfg, inm, outm, ref, out_labels=state_labels(net),
                            meta=meta, progress=args.verbose)
    path = _out(args, "model.json", args.out)
    dnn.save_model(path, model)
    with open(path.with_name(path.stem + "_history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e, row in enumerate(zip(hist.train_loss, hist.val_loss, hist.lr)):
            w.writerow([e, *map(repr, row)])
    log.info("best validation loss %.3e at epoch %d", model.meta["best_val_loss"], hist.best_epoch)
    return EXIT_OK


def cmd_estimate(args) -> int:
    net = load_net(args.net)
    model = dnn.load_model(args.model)
    h = model.meta.get("network_hash")
    if h and h != network_hash(net):
        raise ValueError("model was trained on a different network")
    if "placement" not in model.meta:
        raise ValueError("model file carries no placement")
    pl = SmdPlacement.parse(model.meta["placement"])
    ids, z = read_measurements_csv(args.z, net, pl)
    xh = dnn.predict(model, z.features())
    P = len(net.phase_labels)
    write_state_table(_out(args, "xhat.csv", args.out), net.phase_labels, xh[:, :P], dnn.wrap180(xh[:, P:]), ids)
    return EXIT_OK


def cmd_lse(args) -> int:
    net = load_net(args.net)
    pl = _placement(args.placement, net) if args.placement else _sites_in_csv(args.z)
    ids, z = read_measurements_csv(args.z, net, pl)
    _, tve = _error_model("tve", args.tve_limit)
    model = lse.build_linear_model(net, pl, tve, use_zip=not args.no_zip)
    rep = lse.check_observability(model)
    with open(_out(args, "observability.json", args.report), "w") as fh:
        json.dump({"full_rank": rep.full_rank, "rank": rep.rank, "n_vars": model.n_vars,
                   "unobservable": [f"{b}.{p}" for b, p in rep.unobservable]}, fh, indent=1)
    est = lse.wls_solve(model, z)
    write_state_table(_out(args, "xhat.csv", args.out), net.phase_labels, est.vmag, est.vang, ids)
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_net(args.net)
    ids_e, vm_e, va_e = read_states_csv(args.est, net)
    vm_t, va_t = _aligned_states(net, args.truth, ids_e)
    rep = metrics.evaluate(args.method, args.error_model, args.n_smd, net.phase_labels, vm_t, va_t, vm_e, va_e)
    path = _out(args, "report.csv", args.out)
    metrics.write_report_csv(path, [rep])
    metrics.write_feature_csv(path.with_name(path.stem + "_features.csv"), [rep])
    print(f"phase MAE {rep.phase_mae:.4f} deg, magnitude MAPE {rep.magnitude_mape:.4f} %")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = experiment.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    out = Path(args.out_dir) if args.out_dir != "." else Path(cfg.out_dir)
    data = experiment.prepare_data(cfg)
    res = experiment.run_experiment(cfg, out, data, progress=args.verbose)
    if args.fig5:
        # the first DNN row is the fig5 training setup; reuse it when its placement is one of the cases
        first = res.outcomes[cfg.dnn[0].tag]
        cache = {tuple(s.label for s in first.placement.sites): first}
        experiment.fig5_study(cfg, out, data, cache=cache, progress=args.verbose)
    for r in res.reports:
        print(f"{r.method:>12}  {r.error_model:<32} SMDs {r.n_smd:>3}  MAE {r.phase_mae:.4f} deg  "
              f"MAPE {r.magnitude_mape:.4f} %")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="dsse", description="synchrophasor state estimation lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample load scenarios and solve them")
    g.add_argument("--net", default="ieee34", help="network JSON or 'ieee34'")
    g.add_argument("--mode", choices=("gaussian", "kde"), default="gaussian")
    g.add_argument("--n", type=int, default=12_500)
    g.add_argument("--start", type=int, default=0, help="first scenario index of the stream")
    g.add_argument("--fraction", type=float, default=0.5)
    g.add_argument("--meters", help="smart-meter CSV for --mode kde")
    g.add_argument("--pf", default="nominal", help="'nominal' or 'lo,hi' power factor range")
    g.add_argument("--placement", help="sites to measure: JSON file, comma list or bus-coverage")
    g.add_argument("--error-model", choices=("gmm", "tve", "none"), default="gmm")
    g.add_argument("--tve-limit", type=float, default=0.01)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("select", parents=[common], help="recommend SMD sites")
    s.add_argument("--net", default="ieee34")
    s.add_argument("--states", required=True)
    s.add_argument("--threshold", type=float, default=0.9)
    s.add_argument("--k", type=int)
    s.add_argument("--out")
    s.add_argument("--heatmap")
    s.set_defaults(func=cmd_select)

    t = sub.add_parser("train", parents=[common], help="train the regressor")
    t.add_argument("--net", default="ieee34")
    t.add_argument("--states", "--scenarios", dest="states", required=True, help="true states CSV")
    t.add_argument("--measurements", required=True)
    t.add_argument("--config", help="TOML with training options (top level or [train])")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", parents=[common], help="run a trained model on measurements")
    e.add_argument("--net", default="ieee34")
    e.add_argument("--model", required=True)
    e.add_argument("--z", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate)

    l_ = sub.add_parser("lse", parents=[common], help="weighted least squares baseline")
    l_.add_argument("--net", default="ieee34")
    l_.add_argument("--placement", help="JSON file or comma list (default: sites in --z)")
    l_.add_argument("--z", required=True)
    l_.add_argument("--tve-limit", type=float, default=0.01)
    l_.add_argument("--no-zip", action="store_true")
    l_.add_argument("--out")
    l_.add_argument("--report", help="observability JSON")
    l_.set_defaults(func=cmd_lse)

    v = sub.add_parser("eval", parents=[common], help="score estimates against true states")
    v.add_argument("--net", default="ieee34")
    v.add_argument("--truth", required=True)
    v.add_argument("--est", required=True)
    v.add_argument("--method", default="estimate")
    v.add_argument("--error-model", default="unknown")
    v.add_argument("--n-smd", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", parents=[common], help="run an experiment TOML")
    x.add_argument("--config", required=True)
    x.add_argument("--fig5", action="store_true", help="also run the four-placement study")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PowerFlowError, ArithmeticError, np.linalg.LinAlgError) as e:
        _report(e)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, tomllib.TOMLDecodeError) as e:
        _report(e)
        return EXIT_INVALID


def _report(e: Exception) -> None:
    where = getattr(e, "stage", None)
    print(f"dsse: error{f' [{where}]' if where else ''}: {e}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
