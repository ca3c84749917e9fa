"""Run the DNN-vs-WLS comparison from experiments/table2.toml.

    python3 scripts/run_table2.py [--ci] [--out-dir runs/table2]

``--ci`` shrinks the run to 2,500 training scenarios and 50 epochs.
"""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from dsse.experiment import load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "experiments" / "table2.toml"))
    ap.add_argument("--out-dir")
    ap.add_argument("--ci", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = load_config(args.config)
    if args.ci:
        cfg = replace(cfg, n_train=2500, train=replace(cfg.train, epochs=50))
    res = run_experiment(cfg, args.out_dir or cfg.out_dir, progress=args.verbose)
    print(f"{'method':<10}{'error model':<34}{'SMDs':>5}{'MAE [deg]':>11}{'MAPE [%]':>10}")
    for r in res.reports:
        print(f"{r.method:<10}{r.error_model:<34}{r.n_smd:>5}{r.phase_mae:>11.4f}{r.magnitude_mape:>10.4f}")
    print("artifacts:", ", ".join(str(p) for p in res.files.values()))


if __name__ == "__main__":
    main()
