"""Template, training and test sample sets and their on-disk format.

Samples always carry all seven planes (R, G, B, D, Nx, Ny, Nz) with raw RGB
in [0, 1]; the modality preset picks planes and RGB is standardized when the
network input is formed. Synthetic samples keep an empty background
(RGB 0, D 1) and are filled online during training.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (Quaternion, enumerate_poses, look_at_pose, quat_angles,
                       subdivide_icosahedron)
from .imaging import CHANNELS, MODALITIES, Sample, PatchTensor, channel_mask, channels_from_mask, extract_patch
from .noise import make_background_pool
from .renderer import RenderedView, make_procedural_mesh, perturb_to_pseudo_real, render

SET_MAGIC = b"PMDS1"
RECORD_MAGIC = b"PT"
KINDS = ("train", "template", "test")
ORIGINS = ("synthetic", "real")

DEFAULT_OBJECTS = (
    ("box", 0.14, 11), ("cylinder", 0.15, 12), ("cone", 0.15, 13),
    ("torus", 0.16, 14), ("star", 0.17, 15), ("sphere", 0.12, 16),
)


class DatasetError(ValueError):
    pass


class SetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    objects: Tuple[Tuple[str, float, int], ...] = DEFAULT_OBJECTS[:4]
    coarse_level: int = 2
    fine_level: int = 3
    in_plane: Tuple[float, float, float] = (-45.0, 45.0, 15.0)
    test_in_plane: Tuple[float, float] = (-45.0, 45.0)
    patch_size: int = 32
    cube_side_m: float = 0.4
    modality: str = "RGB-D"
    radius_m: float = 0.6
    image_size: int = 64
    focal_px: float = 90.0
    real_per_object: int = 50
    depth_sigma_m: float = 0.003
    dropout_rate: float = 0.02
    rgb_jitter: float = 0.1
    real_to_train: float = 0.5
    background_images: int = 16
    asymmetry: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.fine_level <= self.coarse_level:
            raise DatasetError("fine_level must exceed coarse_level")
        if self.modality not in MODALITIES:
            raise DatasetError(f"unknown modality {self.modality!r}")
        if not 0.0 <= self.real_to_train <= 1.0:
            raise DatasetError("real_to_train must be in [0, 1]")
        if not self.objects:
            raise DatasetError("at least one object is required")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise DatasetError(f"unknown dataset config key(s): {', '.join(unknown)}")
        d = dict(d)
        if "objects" in d:
            d["objects"] = tuple(tuple(o) for o in d["objects"])
        for k in ("in_plane", "test_in_plane"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objects"] = [list(o) for o in self.objects]
        d["in_plane"] = list(self.in_plane)
        d["test_in_plane"] = list(self.test_in_plane)
        return d

    @property
    def num_classes(self) -> int:
        return len(self.objects)


@dataclass
class SampleSet:
    """Column-oriented set of samples."""
    kind: str
    planes: np.ndarray
    masks: np.ndarray
    class_ids: np.ndarray
    quats: np.ndarray
    origins: np.ndarray
    sources: np.ndarray
    meta: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.class_ids)

    def __getitem__(self, i) -> Sample:
        return Sample(PatchTensor(self.planes[i], CHANNELS, self.masks[i]), int(self.class_ids[i]),
                      Quaternion.from_array(self.quats[i]), ORIGINS[int(self.origins[i])])

    @property
    def patch_size(self) -> int:
        return self.planes.shape[-1]

    def subset(self, idx, kind: Optional[str] = None) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(kind or self.kind, self.planes[idx], self.masks[idx], self.class_ids[idx],
                         self.quats[idx], self.origins[idx], self.sources[idx], dict(self.meta))

    @classmethod
    def empty(cls, kind: str, size: int, meta=None) -> "SampleSet":
        return cls(kind, np.zeros((0, len(CHANNELS), size, size), np.float32),
                   np.zeros((0, size, size), bool), np.zeros(0, np.int64), np.zeros((0, 4)),
                   np.zeros(0, np.uint8), np.zeros(0, np.int64), dict(meta or {}))

    @classmethod
    def concat(cls, kind: str, sets: Sequence["SampleSet"], meta=None) -> "SampleSet":
        return cls(kind, np.concatenate([s.planes for s in sets]),
                   np.concatenate([s.masks for s in sets]),
                   np.concatenate([s.class_ids for s in sets]),
                   np.concatenate([s.quats for s in sets]),
                   np.concatenate([s.origins for s in sets]),
                   np.concatenate([s.sources for s in sets]), dict(meta or {}))

    def manifest(self) -> dict:
        return dict(kind=self.kind, count=len(self), patch_size=self.patch_size, meta=self.meta,
                    samples=[dict(class_id=int(c), quat=[float(v) for v in q], origin=ORIGINS[int(o)],
                                  source=int(s))
                             for c, q, o, s in zip(self.class_ids, self.quats, self.origins, self.sources)])

    def check_role(self, num_classes: Optional[int] = None) -> None:
        """Raise DatasetError if the set breaks the invariants of its role."""
        if num_classes is not None and len(self) and (self.class_ids.min() < 0 or
                                                      self.class_ids.max() >= num_classes):
            raise DatasetError("class id out of range")
        if self.kind == "template" and np.any(self.origins != 0):
            raise DatasetError("template set must contain only synthetic samples")
        if self.kind == "test" and np.any(self.origins != 1):
            raise DatasetError("test set must contain only real samples")


# --- building --------------------------------------------------------------

def _meshes(cfg: DatasetConfig):
    return [make_procedural_mesh(kind, scale, seed, cfg.asymmetry) for kind, scale, seed in cfg.objects]


def _render_poses(cfg: DatasetConfig, poses, kind: str) -> SampleSet:
    planes, masks, cls, quats, src = [], [], [], [], []
    for c, mesh in enumerate(_meshes(cfg)):
        for k, pose in enumerate(poses):
            try:
                view = render(mesh, pose, cfg.image_size, cfg.focal_px, class_id=c)
                patch = extract_patch(view, cfg.cube_side_m, cfg.patch_size, normalize=False)
            except ValueError as exc:
                raise DatasetError(f"object {c} ({mesh.name}), pose {k}: {exc}") from exc
            planes.append(patch.planes); masks.append(patch.mask)
            cls.append(c); quats.append(pose.orientation.as_array()); src.append(k)
    n = len(cls)
    return SampleSet(kind, np.stack(planes), np.stack(masks), np.array(cls, np.int64),
                     np.array(quats), np.zeros(n, np.uint8), np.array(src, np.int64))


def template_poses(cfg: DatasetConfig):
    lo, hi, stride = cfg.in_plane
    return enumerate_poses(subdivide_icosahedron(cfg.coarse_level), lo, hi, stride, cfg.radius_m)


def training_poses(cfg: DatasetConfig):
    lo, hi, stride = cfg.in_plane
    return enumerate_poses(subdivide_icosahedron(cfg.fine_level), lo, hi, stride, cfg.radius_m)


def build_template_set(cfg: DatasetConfig) -> SampleSet:
    """Clean renders of every object at every coarse pose."""
    s = _render_poses(cfg, template_poses(cfg), "template")
    s.meta = dict(num_classes=cfg.num_classes, modality=cfg.modality)
    return s


def nearest_template_angles(quats: np.ndarray, class_ids: np.ndarray, templates: SampleSet) -> np.ndarray:
    """Angle (radians) from each pose to its nearest same-class template."""
    out = np.full(len(quats), np.inf)
    for c in np.unique(class_ids):
        tq = templates.quats[templates.class_ids == c]
        sel = np.flatnonzero(class_ids == c)
        if len(tq) == 0:
            continue
        dots = np.abs(quats[sel] @ tq.T)
        out[sel] = 2.0 * np.arccos(np.clip(dots.max(axis=1), 0.0, 1.0))
    return out


@functools.lru_cache(maxsize=4)
def _real_pool_cached(cfg_json: str) -> SampleSet:
    cfg = DatasetConfig.from_dict(json.loads(cfg_json))
    return _build_real_pool(cfg)


def real_pool(cfg: DatasetConfig) -> SampleSet:
    """Pseudo-real views: random upper-hemisphere poses, cluttered background, sensor noise."""
    s = _real_pool_cached(json.dumps(cfg.to_dict(), sort_keys=True))
    return s.subset(np.arange(len(s)))


def _build_real_pool(cfg: DatasetConfig) -> SampleSet:
    ss = np.random.SeedSequence([cfg.seed, 0x5EA1])
    pose_rng, bg_seq, noise_seq = [np.random.default_rng(s) for s in ss.spawn(3)]
    backgrounds = make_background_pool(cfg.background_images, cfg.image_size, cfg.focal_px,
                                       seed=int(bg_seq.integers(1 << 31)))
    planes, masks, cls, quats, src = [], [], [], [], []
    idx = 0
    for c, mesh in enumerate(_meshes(cfg)):
        for _ in range(cfg.real_per_object):
            # uniform direction on the upper hemisphere
            z = pose_rng.uniform(0.0, 1.0)
            phi = pose_rng.uniform(0.0, 2 * np.pi)
            direction = [np.sqrt(1 - z * z) * np.cos(phi), np.sqrt(1 - z * z) * np.sin(phi), z]
            roll = pose_rng.uniform(*cfg.test_in_plane)
            pose = look_at_pose(direction, cfg.radius_m, roll)
            view = render(mesh, pose, cfg.image_size, cfg.focal_px, class_id=c)
            bg_rgb, bg_depth = backgrounds[int(pose_rng.integers(len(backgrounds)))]
            fg = view.foreground
            noisy = perturb_to_pseudo_real(view, int(noise_seq.integers(1 << 31)), cfg.depth_sigma_m,
                                           cfg.dropout_rate, cfg.rgb_jitter)
            # dropped-out object pixels stay holes instead of showing the background
            scene = RenderedView(np.where(fg[..., None], noisy.rgb, bg_rgb), np.where(fg, noisy.depth, bg_depth),
                                 pose, c, view.center_depth, view.focal_px)
            patch = extract_patch(scene, cfg.cube_side_m, cfg.patch_size, normalize=False)
            fg_patch = extract_patch(view, cfg.cube_side_m, cfg.patch_size, normalize=False,
                                     with_normals=False).mask
            planes.append(patch.planes); masks.append(fg_patch)
            cls.append(c); quats.append(pose.orientation.as_array()); src.append(idx)
            idx += 1
    n = len(cls)
    return SampleSet("test", np.stack(planes), np.stack(masks), np.array(cls, np.int64),
                     np.array(quats), np.ones(n, np.uint8), np.array(src, np.int64))


def select_real_for_training(real: SampleSet, templates: SampleSet, fraction: float) -> np.ndarray:
    """Per class, the ``fraction`` of real samples closest in pose to a template."""
    dist = nearest_template_angles(real.quats, real.class_ids, templates)
    chosen = []
    for c in np.unique(real.class_ids):
        sel = np.flatnonzero(real.class_ids == c)
        order = sel[np.lexsort((sel, dist[sel]))]
        chosen.extend(order[:int(round(fraction * len(sel)))].tolist())
    return np.sort(np.array(chosen, dtype=np.int64))


def build_training_set(cfg: DatasetConfig, templates: Optional[SampleSet] = None) -> SampleSet:
    """Fine-sampled synthetic views plus the pose-closest fraction of real views."""
    templates = build_template_set(cfg) if templates is None else templates
    synth = _render_poses(cfg, training_poses(cfg), "train")
    gap = nearest_template_angles(synth.quats, synth.class_ids, templates)
    real = real_pool(cfg)
    chosen = select_real_for_training(real, templates, cfg.real_to_train)
    meta = dict(num_classes=cfg.num_classes, modality=cfg.modality, coverage_gap_deg=float(np.degrees(gap.max())),
                real_sources=[int(s) for s in real.sources[chosen]])
    return SampleSet.concat("train", [synth, real.subset(chosen)], meta)


def build_test_set(cfg: DatasetConfig, train_set: SampleSet) -> SampleSet:
    """All real views not used for training."""
    real = real_pool(cfg)
    used = set(train_set.sources[train_set.origins == 1].tolist())
    keep = np.array([i for i, s in enumerate(real.sources) if s not in used], dtype=np.int64)
    if len(used) + len(keep) != len(real):
        raise DatasetError("training set references real samples outside the pool")
    test = real.subset(keep, kind="test")
    if set(test.sources.tolist()) & used:
        raise DatasetError("test set overlaps the training set")
    if len(test) == 0:
        warnings.warn("test set is empty (all real samples went to training)", RuntimeWarning,
                      stacklevel=2)
    test.meta = dict(num_classes=cfg.num_classes, modality=cfg.modality)
    return test


def build_all(cfg: DatasetConfig):
    templates = build_template_set(cfg)
    train = build_training_set(cfg, templates)
    test = build_test_set(cfg, train)
    return train, templates, test


# --- persistence -----------------------------------------------------------

_REC_HEAD = struct.Struct("<2sHBi4dB")


def save_set(sample_set: SampleSet, path) -> None:
    """One file: magic, manifest (JSON), then one record per sample."""
    s = sample_set.patch_size
    cmask = channel_mask(CHANNELS)
    head = _REC_HEAD.size
    rec_size = head + 4 * len(CHANNELS) * s * s + s * s
    man = sample_set.manifest()
    for k, entry in enumerate(man["samples"]):
        entry["offset"] = k * rec_size
    mb = json.dumps(man, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SET_MAGIC + struct.pack("<BII", KINDS.index(sample_set.kind), len(sample_set), len(mb)))
        fh.write(mb)
        for i in range(len(sample_set)):
            q = sample_set.quats[i]
            fh.write(_REC_HEAD.pack(RECORD_MAGIC, s, cmask, int(sample_set.class_ids[i]),
                                    *[float(v) for v in q], int(sample_set.origins[i])))
            fh.write(sample_set.planes[i].astype("<f4").tobytes())
            fh.write(sample_set.masks[i].astype(np.uint8).tobytes())


def load_set(path) -> SampleSet:
    raw = Path(path).read_bytes()
    if raw[:len(SET_MAGIC)] != SET_MAGIC:
        raise SetFormatError(f"{path}: bad magic, not a sample set file")
    try:
        kind_code, count, mlen = struct.unpack_from("<BII", raw, len(SET_MAGIC))
        off = len(SET_MAGIC) + 9
        man = json.loads(raw[off:off + mlen].decode())
        off += mlen
        if man["count"] != count or len(man["samples"]) != count:
            raise SetFormatError(f"{path}: manifest count does not match header")
        s = int(man["patch_size"])
        planes = np.zeros((count, len(CHANNELS), s, s), np.float32)
        masks = np.zeros((count, s, s), bool)
        cls = np.zeros(count, np.int64)
        quats = np.zeros((count, 4))
        origins = np.zeros(count, np.uint8)
        for i in range(count):
            magic, size, cmask, c, w, x, y, z, o = _REC_HEAD.unpack_from(raw, off)
            if magic != RECORD_MAGIC or size != s:
                raise SetFormatError(f"{path}: corrupt record {i}")
            chans = channels_from_mask(cmask)
            off += _REC_HEAD.size
            n = len(chans) * s * s
            if off + 4 * n + s * s > len(raw):
                raise SetFormatError(f"{path}: truncated at record {i}")
            planes[i] = np.frombuffer(raw, "<f4", n, off).reshape(len(chans), s, s)
            off += 4 * n
            masks[i] = np.frombuffer(raw, np.uint8, s * s, off).reshape(s, s).astype(bool)
            off += s * s
            cls[i], quats[i], origins[i] = c, (w, x, y, z), o
        if off != len(raw):
            raise SetFormatError(f"{path}: trailing bytes after {count} records")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise SetFormatError(f"{path}: corrupt or truncated set file ({exc})") from exc
    sources = np.array([e["source"] for e in man["samples"]], np.int64)
    return SampleSet(KINDS[kind_code], planes, masks, cls, quats, origins, sources, man["meta"])


def export_manifest(sample_set: SampleSet, path) -> None:
    Path(path).write_text(json.dumps(sample_set.manifest(), indent=1, sort_keys=True))
