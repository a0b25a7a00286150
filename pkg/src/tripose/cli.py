"""Command-line entry point: generate sets, train, evaluate, emit presets.

Configs are JSON files with three sections::

    {"name": "...", "note": "...",
     "dataset": {DatasetConfig fields},
     "train": {TrainConfig fields},
     "model": {"dim": 3, "filters": [8, 16], "hidden": 64}}

Missing keys take their defaults; unknown keys are rejected by name.
Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .dataset import (DatasetConfig, SampleSet, SetFormatError, build_all, load_set, save_set)
from .embed import CheckpointError, EmbeddingNet, NetConfigError
from .eval import evaluate
from .imaging import MODALITIES, ConfigurationError
from .knn import build_db
from .noise import load_background_pool, make_background_pool, save_background_pool
from .train import TrainConfig, TrainingError, probe_split, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SET_FILES = {"train": "train.pmds", "template": "templates.pmds", "test": "test.pmds"}
TOP_KEYS = ("name", "note", "dataset", "train", "model")
MODEL_KEYS = ("dim", "filters", "hidden")

# Six procedural objects with distinct sizes; the size difference is what lets
# a depth-only descriptor tell the torus from the star at 24 px.
DESK_OBJECTS = [["box", 0.17, 11], ["cylinder", 0.10, 12], ["cone", 0.15, 13],
                ["torus", 0.13, 14], ["star", 0.17, 15], ["sphere", 0.07, 16]]
DESK_DATASET = dict(objects=DESK_OBJECTS, coarse_level=0, fine_level=1, patch_size=24,
                    real_per_object=100, modality="D")
DESK_TRAIN = dict(learning_rate=1e-3, grad_clip=10.0, triplets_per_step=16, pairs_per_step=4,
                  epochs=15)
DESK_MODEL = dict(dim=3, filters=[8, 16], hidden=64)


class CLIError(Exception):
    """Usage or configuration problem; maps to exit code 2."""


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: Dict = field(default_factory=lambda: dict(DESK_MODEL))
    name: str = "run"
    note: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise CLIError("config must be a JSON object")
        unknown = sorted(set(d) - set(TOP_KEYS))
        if unknown:
            raise CLIError(f"unknown config key(s): {', '.join(unknown)}")
        model = dict(DESK_MODEL)
        bad = sorted(set(d.get("model", {})) - set(MODEL_KEYS))
        if bad:
            raise CLIError(f"unknown model config key(s): {', '.join(bad)}")
        model.update(d.get("model", {}))
        try:
            return cls(DatasetConfig.from_dict(d.get("dataset", {})),
                       TrainConfig.from_dict(d.get("train", {})), model,
                       str(d.get("name", "run")), str(d.get("note", "")))
        except (ValueError, TypeError) as exc:
            raise CLIError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dict(name=self.name, note=self.note, dataset=self.dataset.to_dict(),
                    train=self.train.to_dict(), model=dict(self.model))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, dataset=dataclasses.replace(self.dataset, seed=seed),
                                   train=dataclasses.replace(self.train, seed=seed))

    def make_net(self) -> EmbeddingNet:
        try:
            net = EmbeddingNet(len(MODALITIES[self.dataset.modality]), self.dataset.patch_size,
                               int(self.model["dim"]), tuple(self.model["filters"]),
                               int(self.model["hidden"]))
        except NetConfigError as exc:
            raise CLIError(str(exc)) from exc
        return net.init_params(self.train.seed)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})") from exc


def training_backgrounds(dcfg: DatasetConfig):
    """Background pool for ``real`` noise, drawn from scenes disjoint from the test pool's."""
    return make_background_pool(dcfg.background_images, dcfg.image_size, dcfg.focal_px,
                                seed=1_000_003 * (dcfg.seed + 1))


# --- presets ---------------------------------------------------------------

def _desk(name, dataset=None, train=None, model=None, note="") -> dict:
    return dict(name=name, note=note, dataset={**DESK_DATASET, **(dataset or {})},
                train={**DESK_TRAIN, **(train or {})}, model={**DESK_MODEL, **(model or {})})


def _scale_objects() -> list:
    kinds = ["box", "cylinder", "cone", "torus", "star", "sphere"]
    small = [0.08, 0.06, 0.08, 0.07, 0.09, 0.05]
    large = [0.17, 0.12, 0.16, 0.15, 0.18, 0.10]
    return [[k, s, 11 + i] for i, (k, s) in enumerate(zip(kinds, large))] + \
           [[k, s, 31 + i] for i, (k, s) in enumerate(zip(kinds, small))]


def preset_configs(name: str) -> List[dict]:
    """Full configs for a named sweep; each differs from the others only in the swept variable."""
    if name == "testA_inplane":
        return [_desk("testA_no_inplane", dataset=dict(in_plane=[0.0, 0.0, 15.0])),
                _desk("testA_inplane")]
    if name == "testB_margin":
        return [_desk(f"testB_{m}_d{d}", train=dict(margin_mode=m), model=dict(dim=d))
                for d in (3, 16) for m in ("static", "dynamic")]
    if name == "testC_noise":
        return [_desk(f"testC_{k}", dataset=dict(real_to_train=0.0), train=dict(noise_kind=k))
                for k in ("white", "shapes", "fractal", "real")]
    if name == "testD_channels":
        return [_desk(f"testD_{m}", dataset=dict(modality=m)) for m in ("D", "N", "N+D")]
    if name == "testE_scale":
        note = ("desk-scaled object count: 12 procedural objects (six shapes at two sizes) "
                "stand in for a 50-object roster")
        return [_desk("testE_scale", dataset=dict(objects=_scale_objects(), real_per_object=50),
                      note=note)]
    raise CLIError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")


PRESETS = ("testA_inplane", "testB_margin", "testC_noise", "testD_channels", "testE_scale")


# --- library-level runs ----------------------------------------------------

def run_config(cfg: RunConfig, sets: Optional[Tuple[SampleSet, SampleSet, SampleSet]] = None,
               probe: bool = False, log=None):
    """Build (or reuse) the sets, train, evaluate on the test set.

    Returns (EvalResult, TrainReport, net).
    """
    train_set, templates, test_set = sets if sets is not None else build_all(cfg.dataset)
    pool = training_backgrounds(cfg.dataset) if cfg.train.noise_kind == "real" \
        or cfg.train.noise_policy == "mixed" else None
    probe_set = probe_split(test_set, cfg.train.probe_fraction, cfg.train.seed)[0] if probe else None
    net, report = train(cfg.make_net(), train_set, templates, cfg.train, probe_set,
                        noise_pool=pool, log=log)
    return evaluate(net, build_db(net, templates), test_set), report, net


# --- commands --------------------------------------------------------------

def _resolve(args) -> RunConfig:
    if args.config is None:
        raise CLIError("--config is required")
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _load_sets(data_dir) -> Dict[str, SampleSet]:
    data_dir = Path(data_dir)
    out = {}
    for kind, fname in SET_FILES.items():
        p = data_dir / fname
        if not p.exists():
            raise CLIError(f"missing dataset file {p}")
        try:
            out[kind] = load_set(p)
        except SetFormatError as exc:
            raise CLIError(str(exc)) from exc
    return out


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    try:
        train_set, templates, test_set = build_all(cfg.dataset)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    for s in (train_set, templates, test_set):
        save_set(s, out / SET_FILES[s.kind])
    save_background_pool(training_backgrounds(cfg.dataset), out / "backgrounds")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = {s.kind: s.manifest() for s in (train_set, templates, test_set)}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data = Path(args.data or "data")
    sets = _load_sets(data)
    pool = None
    if cfg.train.noise_kind == "real" or cfg.train.noise_policy == "mixed":
        bg_dir = data / "backgrounds"
        pool = load_background_pool(bg_dir) if bg_dir.is_dir() else training_backgrounds(cfg.dataset)
    for kind, s in sets.items():
        if s.meta.get("modality") != cfg.dataset.modality:
            raise CLIError(f"{kind} set has modality {s.meta.get('modality')!r}, "
                           f"config asks for {cfg.dataset.modality!r}")
    probe = probe_split(sets["test"], cfg.train.probe_fraction, cfg.train.seed)[0] \
        if cfg.train.probe_fraction > 0 else None
    try:
        net, report = train(cfg.make_net(), sets["train"], sets["template"], cfg.train, probe,
                            noise_pool=pool, log=None if args.quiet else print)
    except ConfigurationError as exc:
        raise CLIError(str(exc)) from exc
    ckpt = Path(args.out or "model.pmnet")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    net.save(ckpt)
    report.write_csv(ckpt.with_suffix(".csv"))
    print(f"wrote {ckpt} and {ckpt.with_suffix('.csv')} ({report.epochs} epochs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise CLIError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CLIError(f"missing checkpoint {ckpt}")
    try:
        net = EmbeddingNet.load(ckpt)
    except CheckpointError as exc:
        raise CLIError(str(exc)) from exc
    sets = _load_sets(args.data or "data")
    query = sets["template"] if args.against == "templates" else sets["test"]
    try:
        db = build_db(net, sets["template"])
        res = evaluate(net, db, query)
    except ConfigurationError as exc:
        raise CLIError(str(exc)) from exc
    res.check()
    out = Path(args.out or ckpt.with_suffix(".eval.csv"))
    out.write_text(res.to_csv())
    print(res.table(ckpt.stem))
    return EXIT_OK


def cmd_preset(args) -> int:
    name = args.preset or args.name
    if name is None:
        raise CLIError(f"--preset is required; choose one of {', '.join(PRESETS)}")
    configs = preset_configs(name)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for c in configs:
        resolved = RunConfig.from_dict(c)
        if args.seed is not None:
            resolved = resolved.with_seed(args.seed)
        p = out / f"{c['name']}.json"
        p.write_text(json.dumps(resolved.to_dict(), indent=2, sort_keys=True) + "\n")
        print(p)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "preset": cmd_preset}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tripose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    g = sub.add_parser("gen", help="render template, training and test sets")
    g.add_argument("--config", help="JSON run config (desk defaults if omitted)")
    g.add_argument("--out", help="output directory for sets and backgrounds (default: data)")
    g.add_argument("--seed", type=int, help="override the dataset and train seeds")
    t = sub.add_parser("train", help="train an embedding network")
    t.add_argument("--config", help="JSON run config (desk defaults if omitted)")
    t.add_argument("--data", help="directory written by 'gen' (default: data)")
    t.add_argument("--out", help="checkpoint path (default: model.pmnet); the curve CSV goes beside it")
    t.add_argument("--seed", type=int, help="override the dataset and train seeds")
    t.add_argument("--quiet", action="store_true", help="no per-epoch log lines")
    e = sub.add_parser("eval", help="nearest-template evaluation")
    e.add_argument("--checkpoint", help="checkpoint written by 'train'")
    e.add_argument("--data", help="directory written by 'gen' (default: data)")
    e.add_argument("--out", help="metric CSV path (default: <checkpoint>.eval.csv)")
    e.add_argument("--against", choices=("test", "templates"), default="test",
                   help="query set: pseudo-real test views or the templates themselves")
    r = sub.add_parser("preset", help="write the configs of a named sweep")
    r.add_argument("name", nargs="?", help=f"one of {', '.join(PRESETS)}")
    r.add_argument("--preset", help="same as the positional name")
    r.add_argument("--out", help="directory for one JSON config per run (default: .)")
    r.add_argument("--seed", type=int, help="seed written into every config")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CLIError(f"a command is required: {', '.join(COMMANDS)}")
        return COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
