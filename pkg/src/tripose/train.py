"""Online triplet/pair batch generation and the SGD training loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .embed import EmbeddingNet
from .imaging import MODALITIES, ConfigurationError, network_input
from .loss import DEFAULT_N, DEFAULT_STATIC_MARGIN, LossConfigError, dynamic_margins, total_loss
from .noise import NOISE_KINDS, NoiseConfigError, NoiseSpec, fill_batch

MARGIN_MODES = ("static", "dynamic")
NOISE_POLICIES = ("single", "mixed")
_ANGLE_EPS = 1e-9


class TrainConfigError(ConfigurationError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    triplets_per_step: int = 32
    pairs_per_step: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 15
    margin_mode: str = "dynamic"
    static_margin: float = DEFAULT_STATIC_MARGIN
    inter_class_margin: float = DEFAULT_N
    noise_kind: str = "fractal"
    noise_policy: str = "single"
    noise_octaves: int = 4
    noise_persistence: float = 0.5
    noise_all_members: bool = False
    probe_fraction: float = 0.1
    compute_dtype: str = "float32"
    grad_clip: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise TrainConfigError("learning_rate must be >= 0")
        if self.triplets_per_step < 1 or self.pairs_per_step < 0:
            raise TrainConfigError("triplets_per_step must be >= 1 and pairs_per_step >= 0")
        if not 0 <= self.momentum < 1:
            raise TrainConfigError("momentum must be in [0, 1)")
        if self.epochs < 0:
            raise TrainConfigError("epochs must be >= 0")
        if self.margin_mode not in MARGIN_MODES:
            raise TrainConfigError(f"margin_mode must be one of {MARGIN_MODES}")
        if self.margin_mode == "static" and self.static_margin <= 0:
            raise TrainConfigError("static_margin must be > 0")
        if self.inter_class_margin <= math.pi:
            raise TrainConfigError("inter_class_margin must exceed pi")
        if self.noise_kind not in NOISE_KINDS:
            raise TrainConfigError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.noise_policy not in NOISE_POLICIES:
            raise TrainConfigError(f"noise_policy must be one of {NOISE_POLICIES}")
        if not 0 <= self.probe_fraction < 1:
            raise TrainConfigError("probe_fraction must be in [0, 1)")
        if self.grad_clip < 0:
            raise TrainConfigError("grad_clip must be >= 0 (0 disables clipping)")
        if self.compute_dtype not in ("float32", "float64"):
            raise TrainConfigError("compute_dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise TrainConfigError(f"unknown train config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --- batch generation ------------------------------------------------------

@dataclass
class Batch:
    """Network input rows plus index triplets/pairs into them.

    Rows are laid out as anchors, pullers, pushers, then pair partners.
    """
    x: np.ndarray
    triplets: np.ndarray
    margins: np.ndarray
    pairs: np.ndarray
    anchors: np.ndarray
    pullers: np.ndarray
    pushers: np.ndarray
    raw_anchor_planes: np.ndarray


class BatchPlan:
    """Per-run lookup tables shared by every ``make_batch`` call."""

    def __init__(self, train_set, template_set, cfg: TrainConfig, noise_pool=None):
        if len(train_set) == 0:
            raise TrainConfigError("training set is empty")
        self.modality = train_set.meta.get("modality", "RGB-D")
        if template_set.meta.get("modality", self.modality) != self.modality:
            raise TrainConfigError("training and template sets use different modalities")
        missing = sorted(set(train_set.class_ids.tolist()) - set(template_set.class_ids.tolist()))
        if missing:
            raise TrainConfigError(f"class(es) {missing} have no templates")
        self.cfg = cfg
        self.n = len(train_set)
        self.steps_per_epoch = -(-self.n // cfg.triplets_per_step)
        self.classes = np.unique(template_set.class_ids)
        self.tmpl_by_class = {int(c): np.flatnonzero(template_set.class_ids == c) for c in self.classes}
        self.other_class = {int(c): np.flatnonzero(template_set.class_ids != c) for c in self.classes}
        # angles from each training sample to every template of its class
        self.angles: List[np.ndarray] = []
        self.puller = np.empty(self.n, dtype=np.int64)
        for i in range(self.n):
            cand = self.tmpl_by_class[int(train_set.class_ids[i])]
            dots = np.abs(template_set.quats[cand] @ train_set.quats[i])
            ang = 2.0 * np.arccos(np.clip(dots, 0.0, 1.0))
            self.angles.append(ang)
            self.puller[i] = cand[int(np.argmin(ang))]
        self.noise_specs = self._noise_specs(noise_pool)

    def _noise_specs(self, pool):
        kinds = [self.cfg.noise_kind] if self.cfg.noise_policy == "single" else \
            [k for k in NOISE_KINDS if k != "real" or pool]
        specs = []
        for k in kinds:
            try:
                specs.append(NoiseSpec(k, octaves=self.cfg.noise_octaves,
                                       persistence=self.cfg.noise_persistence,
                                       pool=tuple(pool) if (pool and k == "real") else None))
            except NoiseConfigError as exc:
                raise TrainConfigError(str(exc)) from exc
        return specs

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, 0xE0C, epoch]).permutation(self.n)

    def anchors_for_step(self, step_index: int) -> np.ndarray:
        epoch, k = divmod(step_index, self.steps_per_epoch)
        b = self.cfg.triplets_per_step
        return self.epoch_order(epoch)[k * b:(k + 1) * b]


def make_batch(train_set, template_set, step_index: int, cfg: TrainConfig,
               plan: Optional[BatchPlan] = None, noise_pool=None) -> Batch:
    """Triplets and pairs for one step, with freshly filled synthetic anchors.

    Anchors walk a seeded per-epoch permutation. The puller is the nearest
    same-class template; pushers alternate between a farther same-class
    template (even triplet index) and a template of another class (odd).
    Pairs join the first anchors with their clean counterpart: the unfilled
    patch for synthetic anchors, the nearest template for real ones. With
    ``noise_all_members`` the puller and pusher templates get their own fills.
    """
    plan = plan or BatchPlan(train_set, template_set, cfg, noise_pool)
    rng = np.random.default_rng([cfg.seed, 0xBA7C, step_index])
    anchors = plan.anchors_for_step(step_index)
    b = len(anchors)
    pullers = plan.puller[anchors]
    pushers = np.empty(b, dtype=np.int64)
    for t, a in enumerate(anchors):
        c = int(train_set.class_ids[a])
        ang = plan.angles[a]
        farther = plan.tmpl_by_class[c][ang > ang.min() + _ANGLE_EPS]
        others = plan.other_class[c]
        same = (t % 2 == 0 and len(farther)) or not len(others)
        pool = farther if same else others
        pushers[t] = pool[rng.integers(len(pool))]
    if cfg.margin_mode == "dynamic":
        margins = dynamic_margins(train_set.class_ids[anchors], train_set.quats[anchors],
                                  template_set.class_ids[pushers], template_set.quats[pushers],
                                  cfg.inter_class_margin)
    else:
        margins = np.full(b, cfg.static_margin)
    if np.any(margins <= 0):
        raise LossConfigError("constructed a triplet with zero margin")

    raw = train_set.planes[anchors]
    filled = raw.copy()
    synth = np.flatnonzero(train_set.origins[anchors] == 0)
    if len(synth):
        spec = plan.noise_specs[int(rng.integers(len(plan.noise_specs)))]
        filled[synth] = fill_batch(raw[synth], train_set.masks[anchors[synth]], spec,
                                   int(rng.integers(1 << 62))).astype(raw.dtype)
    pull_planes, push_planes = template_set.planes[pullers], template_set.planes[pushers]
    if cfg.noise_all_members:
        spec = plan.noise_specs[int(rng.integers(len(plan.noise_specs)))]
        both = fill_batch(np.concatenate([pull_planes, push_planes]),
                          template_set.masks[np.concatenate([pullers, pushers])], spec,
                          int(rng.integers(1 << 62))).astype(raw.dtype)
        pull_planes, push_planes = both[:b], both[b:]
    p = min(cfg.pairs_per_step, int(round(b * cfg.pairs_per_step / cfg.triplets_per_step)))
    partner = np.where(train_set.origins[anchors[:p]][:, None, None, None] == 0,
                       raw[:p], template_set.planes[pullers[:p]])
    planes = np.concatenate([filled, pull_planes, push_planes, partner])
    x = network_input(planes, plan.modality)
    ar = np.arange(b)
    triplets = np.stack([ar, b + ar, 2 * b + ar], axis=1)
    pairs = np.stack([np.arange(p), 3 * b + np.arange(p)], axis=1)
    return Batch(x, triplets, margins, pairs, anchors, pullers, pushers, filled)


# --- optimisation ----------------------------------------------------------

class SGDMomentum:
    """v <- momentum * v - lr * g;  p <- p + v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros(params[name].shape, dtype=np.float64)
            v = self.momentum * v - self.lr * np.asarray(g, dtype=np.float64)
            self.velocity[name] = v
            params[name] = (params[name] + v).astype(params[name].dtype)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    class_rate: float
    mean_ang_err: float
    wall_time: float = 0.0
    probe_result: Optional[object] = field(default=None, repr=False, compare=False)


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)
    steps: int = 0

    @property
    def epochs(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "class_rate", "mean_ang_err"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.class_rate:.6f}", f"{r.mean_ang_err:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def probe_split(test_set, fraction: float, seed: int):
    """Seeded split of ``test_set`` into (probe, rest)."""
    n = len(test_set)
    k = int(round(fraction * n))
    order = np.random.default_rng([seed, 0x9B0B]).permutation(n)
    return test_set.subset(np.sort(order[:k])), test_set.subset(np.sort(order[k:]))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)
    return norm


def train_step(net: EmbeddingNet, batch: Batch, opt: SGDMomentum, grad_clip: float = 0.0) -> float:
    out, cache = net.forward(batch.x)
    loss, g = total_loss(out, batch.triplets, batch.margins, batch.pairs)
    if not np.isfinite(loss):
        return loss
    grads, _ = net.backward(g, cache)
    if grad_clip > 0:
        clip_by_global_norm(grads, grad_clip)
    opt.step(net.params, grads)
    net.touch()
    return loss


def train(net: EmbeddingNet, train_set, template_set, cfg: TrainConfig, probe_set=None,
          noise_pool=None, log=None):
    """SGD with momentum over the total loss; returns (net, TrainReport).

    After every epoch the templates and ``probe_set`` are embedded and the
    probe is classified by its nearest template.
    """
    from .eval import evaluate
    from .knn import build_db

    plan = BatchPlan(train_set, template_set, cfg, noise_pool)
    if net.in_channels != len(MODALITIES[plan.modality]):
        raise TrainConfigError(f"network takes {net.in_channels} planes, modality {plan.modality} "
                               f"has {len(MODALITIES[plan.modality])}")
    net.compute_dtype = np.float32 if cfg.compute_dtype == "float32" else np.float64
    opt = SGDMomentum(cfg.learning_rate, cfg.momentum)
    report = TrainReport()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for _ in range(plan.steps_per_epoch):
            batch = make_batch(train_set, template_set, step, cfg, plan)
            loss = train_step(net, batch, opt, cfg.grad_clip)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch + 1}, step {step}")
            losses.append(loss)
            step += 1
        rate, err, res = float("nan"), float("nan"), None
        if probe_set is not None and len(probe_set):
            res = evaluate(net, build_db(net, template_set, plan.modality), probe_set)
            rate, err = res.classification_rate, res.mean_ang_err_correct
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), rate, err, time.perf_counter() - t0, res)
        report.records.append(rec)
        if log:
            log(f"epoch {rec.epoch:3d}  loss {rec.loss:9.4f}  class {rec.class_rate:6.3f}  "
                f"err {rec.mean_ang_err:6.2f}  ({rec.wall_time:.1f}s)")
    report.steps = step
    return net, report
