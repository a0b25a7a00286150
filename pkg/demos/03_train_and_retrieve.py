"""Train a small descriptor network and retrieve class and pose by nearest template.

Run: python demos/03_train_and_retrieve.py [epochs]
Uses the desk-scale dataset from the presets, trains with the dynamic margin
and prints the per-epoch probe accuracy and the final four-metric table.
"""
import dataclasses
import sys

from tripose.cli import RunConfig, preset_configs, run_config

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
cfg = RunConfig.from_dict(preset_configs("testB_margin")[1])  # dynamic margin, d = 3
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=epochs))
print(f"objects: {[o[0] for o in cfg.dataset.objects]}, modality {cfg.dataset.modality}, "
      f"descriptor dim {cfg.model['dim']}")

res, report, net = run_config(cfg, probe=True, log=print)
print()
print(res.table("dynamic"))
print("per-class rate:", {k: round(v, 3) for k, v in res.per_class.items()})
