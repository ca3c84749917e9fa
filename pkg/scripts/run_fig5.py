"""Four-placement study on IEEE 34: sites 808-812 alone, with 830-854,
with 888-890, and 888-890 alone.  Writes per-node MAE CSV and SVG.

    python3 scripts/run_fig5.py [--ci] [--out-dir runs/fig5]
"""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from dsse.experiment import fig5_study, load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "experiments" / "table2.toml"))
    ap.add_argument("--out-dir", default="runs/fig5")
    ap.add_argument("--ci", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = load_config(args.config)
    if args.ci:
        cfg = replace(cfg, n_train=2500, train=replace(cfg.train, epochs=50))
    res = fig5_study(cfg, args.out_dir, progress=args.verbose)
    for r in res.reports:
        print(f"{r.method:<32} MAE {r.phase_mae:.4f} deg   on 888/890 {r.mae_on(['888', '890']):.4f} deg")
    print("artifacts:", ", ".join(str(p) for p in res.files.values()))


if __name__ == "__main__":
    main()
