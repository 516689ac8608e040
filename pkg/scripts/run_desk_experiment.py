"""Run the full desk experiment in one directory and print the headline numbers.

    python3 scripts/run_desk_experiment.py --root runs/desk
"""
import argparse
import csv
import json
import logging
import time
from pathlib import Path

from mgmoe.cleans import write_clean_set
from mgmoe.config import load_config
from mgmoe.pipeline import cmd_build, cmd_eval, cmd_stats, cmd_synth


def rooted(cfg, root: Path):
    for name in ("clean_dir", "corpus_dir", "models_dir", "reports_dir"):
        setattr(cfg, name, str(root / getattr(cfg, name)))
    return cfg


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default="runs/desk")
    ap.add_argument("--config", default=None)
    ap.add_argument("--no-sweeps", action="store_true")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = Path(a.root)
    cfg = rooted(load_config(a.config), root)
    if not any(Path(cfg.clean_dir).glob("*.png")):
        n = sum(cfg.clean_splits.values())
        write_clean_set(cfg.clean_dir, n, seed=cfg.seed)

    t0 = time.perf_counter()
    cmd_synth(cfg)
    cmd_build(cfg)
    cmd_eval(cfg)
    cmd_stats(cfg)
    logging.info("pipeline done in %.1f min", (time.perf_counter() - t0) / 60)
    if not a.no_sweeps:
        for sweep in ("fineness", "granularity"):
            cmd_eval(cfg, sweep=sweep)

    reports = Path(cfg.reports_dir)
    with open(reports / "metrics.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if r["recipe"] == "ALL":
                print(f"{r['dist_mode']:9s} {r['method']:24s} {r['psnr']} dB")
    print(json.dumps(json.loads((reports / "stats.json").read_text()), indent=1))
    for p in sorted(reports.glob("sweep_*.csv")):
        print(p.read_text())


if __name__ == "__main__":
    main()
