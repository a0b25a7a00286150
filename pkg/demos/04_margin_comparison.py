"""Static versus dynamic triplet margin on the same data and seed.

Run: python demos/04_margin_comparison.py [epochs]
Prints the comparison table and writes margin_summary.csv and
margin_curves.csv (one row per epoch and run, measured on a probe split).
"""
import dataclasses
import sys

from tripose.cli import RunConfig, preset_configs, run_config
from tripose.dataset import build_all
from tripose.eval import compare_runs

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
configs = [RunConfig.from_dict(c) for c in preset_configs("testB_margin") if c["model"]["dim"] == 3]
sets = build_all(configs[0].dataset)  # both runs share the dataset

results, curves = [], {}
for cfg in sorted(configs, key=lambda c: c.train.margin_mode):
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=epochs))
    res, report, _ = run_config(cfg, sets, probe=True)
    name = cfg.train.margin_mode
    results.append((name, res))
    curves[name] = [(r.epoch, r.loss, r.probe_result) for r in report.records]
    print(f"{name:>8}: probe rate by epoch {[round(r.class_rate, 2) for r in report.records]}")

table, summary, curve = compare_runs(results, curves)
print(table)
with open("margin_summary.csv", "w") as fh:
    fh.write(summary)
with open("margin_curves.csv", "w") as fh:
    fh.write(curve)
print("wrote margin_summary.csv and margin_curves.csv")
