"""Patch extraction, normalization and surface normals from depth."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .geometry import Quaternion
from .renderer import RenderedView

CHANNELS = ("R", "G", "B", "D", "Nx", "Ny", "Nz")
MODALITIES = {
    "RGB": ("R", "G", "B"),
    "D": ("D",),
    "N": ("Nx", "Ny", "Nz"),
    "RGB-D": ("R", "G", "B", "D"),
    "N+D": ("D", "Nx", "Ny", "Nz"),
    "RGB-N": ("R", "G", "B", "Nx", "Ny", "Nz"),
    "RGB-D-N": CHANNELS,
}
DISCONTINUITY = 0.05


class ExtractionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class PatchTensor:
    """Stack of named S x S planes plus the object foreground mask."""
    planes: np.ndarray
    channels: Tuple[str, ...]
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.channels):
            raise ConfigurationError("planes must be (C, S, S) with one name per channel")
        if self.mask is None:
            self.mask = np.ones(self.planes.shape[1:], dtype=bool)

    @property
    def size(self) -> int:
        return self.planes.shape[-1]

    def plane(self, name: str) -> np.ndarray:
        return self.planes[self.channels.index(name)]

    def has(self, *names: str) -> bool:
        return all(n in self.channels for n in names)

    def copy(self) -> "PatchTensor":
        return PatchTensor(self.planes.copy(), self.channels, self.mask.copy())


@dataclass
class Sample:
    patch: PatchTensor
    class_id: int
    pose: Quaternion
    origin: str = "synthetic"


def channel_mask(channels: Sequence[str]) -> int:
    return sum(1 << CHANNELS.index(c) for c in channels)


def channels_from_mask(mask: int) -> Tuple[str, ...]:
    return tuple(c for i, c in enumerate(CHANNELS) if mask & (1 << i))


# --- normalization ---------------------------------------------------------

def normalize_rgb(rgb: np.ndarray) -> np.ndarray:
    """Per-channel zero mean / unit variance over the patch; constant planes map to zeros.

    Works on (3, S, S) or batched (B, 3, S, S) input.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    mean = rgb.mean(axis=(-2, -1), keepdims=True)
    std = rgb.std(axis=(-2, -1), keepdims=True)
    centered = rgb - mean
    safe = np.where(std > 1e-12, std, 1.0)
    return np.where(std > 1e-12, centered / safe, 0.0)


def depth_to_unit(depth_m: np.ndarray, center_depth_m: float, cube_side_m: float) -> np.ndarray:
    """Affine cube mapping: near face -> 0, far face -> 1, clipped; no-hit (0) -> 1."""
    near = center_depth_m - cube_side_m / 2.0
    d = np.clip((depth_m - near) / cube_side_m, 0.0, 1.0)
    return np.where(depth_m > 0, d, 1.0)


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W[, C]) at continuous pixel-index coordinates."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if img.ndim == 3:
        wy, wx = wy[..., None], wx[..., None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    return (a * (1 - wx) + b * wx) * (1 - wy) + (c * (1 - wx) + d * wx) * wy


def extract_patch(view: RenderedView, cube_side_m: float = 0.4, out_size: int = 32,
                  normalize: bool = True, with_normals: bool = True,
                  window: int = 5) -> PatchTensor:
    """Crop the projection of a cube centered on the object and resample it.

    Returns planes R, G, B, D (and Nx, Ny, Nz with ``with_normals``). With
    ``normalize=False`` the RGB planes keep their raw [0, 1] values so that
    background filling can happen before normalization.
    """
    h_img, w_img = view.depth.shape
    r, f = view.center_depth, view.focal_px
    half = f * (cube_side_m / 2.0) / r
    if half > min(h_img, w_img) / 2.0 + 1e-9:
        raise ExtractionError(
            f"cube projection ({2 * half:.1f} px) exceeds the {w_img}x{h_img} frame")
    step = 2.0 * half / out_size
    # continuous pixel-index coordinates of the patch pixel centers
    xs = w_img / 2.0 - half + (np.arange(out_size) + 0.5) * step - 0.5
    ys = h_img / 2.0 - half + (np.arange(out_size) + 0.5) * step - 0.5
    unit = depth_to_unit(view.depth, r, cube_side_m)
    fg = view.foreground
    weight = _bilinear(fg.astype(np.float64), ys, xs)
    mask = weight >= 0.5
    # interpolate over object samples only, so silhouettes do not blend with the background
    safe = np.where(mask, weight, 1.0)
    d = np.where(mask, _bilinear(np.where(fg, unit, 0.0), ys, xs) / safe, 1.0)
    rgb = _bilinear(np.where(fg[..., None], view.rgb, 0.0), ys, xs) / safe[..., None]
    rgb = np.moveaxis(np.where(mask[..., None], rgb, 0.0), -1, 0)
    if normalize:
        rgb = normalize_rgb(rgb)
    planes = [rgb[0], rgb[1], rgb[2], d]
    channels = ["R", "G", "B", "D"]
    if with_normals:
        n = estimate_normals(d, cube_side_m, mask=mask, window=window, center_depth_m=r)
        planes += [n[0], n[1], n[2]]
        channels += ["Nx", "Ny", "Nz"]
    return PatchTensor(np.stack(planes).astype(np.float32), tuple(channels), mask)


# --- surface normals -------------------------------------------------------

def estimate_normals(depth: np.ndarray, cube_side_m: float = 0.4, focal_px: Optional[float] = None,
                     window: int = 5, mask: Optional[np.ndarray] = None,
                     center_depth_m: float = 0.6, discontinuity: float = DISCONTINUITY) -> np.ndarray:
    """Surface normals of a normalized depth patch via least-squares depth gradients.

    For every pixel the gradient of D is fitted over a ``window`` x ``window``
    neighbourhood from D(x + dx) - D(x) ~ dx . grad D, skipping neighbours
    outside ``mask`` or across a jump larger than ``discontinuity``. The two
    back-projected tangent vectors give the normal, expressed in the camera
    frame (x right, y up, z toward the camera). Pixels outside ``mask`` get
    (0, 0, 0); pixels with too few usable neighbours get (0, 0, 1).

    ``depth`` may be (S, S) or batched (B, S, S). ``mask`` defaults to all
    pixels closer than the far plane. ``focal_px`` defaults to the focal
    length for which the patch spans ``cube_side_m`` at ``center_depth_m``.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 3")
    d = np.asarray(depth, dtype=np.float64)
    single = d.ndim == 2
    if single:
        d = d[None]
    b, s, _ = d.shape
    if mask is None:
        m = d < 1.0 - 1e-9
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
    if focal_px is None:
        focal_px = s * center_depth_m / cube_side_m

    k = window // 2
    pad_d = np.pad(d, ((0, 0), (k, k), (k, k)), constant_values=np.nan)
    pad_m = np.pad(m, ((0, 0), (k, k), (k, k)), constant_values=False)
    suu = np.zeros_like(d); suv = np.zeros_like(d); svv = np.zeros_like(d)
    bu = np.zeros_like(d); bv = np.zeros_like(d)
    for dv in range(-k, k + 1):
        for du in range(-k, k + 1):
            if du == 0 and dv == 0:
                continue
            nb = pad_d[:, k + dv:k + dv + s, k + du:k + du + s]
            ok = pad_m[:, k + dv:k + dv + s, k + du:k + du + s]
            delta = nb - d
            ok = ok & (np.abs(np.nan_to_num(delta, nan=np.inf)) <= discontinuity)
            w = ok.astype(np.float64)
            delta = np.where(ok, delta, 0.0)
            suu += w * du * du; suv += w * du * dv; svv += w * dv * dv
            bu += w * du * delta; bv += w * dv * delta
    det = suu * svv - suv * suv
    good = det > 1e-9
    safe = np.where(good, det, 1.0)
    gu = np.where(good, (svv * bu - suv * bv) / safe, 0.0)
    gv = np.where(good, (suu * bv - suv * bu) / safe, 0.0)

    z = center_depth_m - cube_side_m / 2.0 + cube_side_m * d
    zu, zv = cube_side_m * gu, cube_side_m * gv
    c = s / 2.0
    uu = (np.arange(s) + 0.5 - c)[None, None, :]
    vv = (np.arange(s) + 0.5 - c)[None, :, None]
    f = float(focal_px)
    # tangents of P(u, v) = ((u-c) z / f, -(v-c) z / f, -z)
    tu = np.stack([(z + uu * zu) / f, -vv * zu / f, -zu])
    tv = np.stack([uu * zv / f, -(z + vv * zv) / f, -zv])
    n = np.cross(tu, tv, axis=0)
    p = np.stack([uu * z / f, -vv * z / f, -z])
    flip = np.einsum("c...,c...->...", n, -p) < 0
    n = np.where(flip[None], -n, n)
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    n = np.where(good[None], n, np.array([0.0, 0.0, 1.0])[:, None, None, None])
    n = np.where(m[None], n, 0.0)
    n = np.moveaxis(n, 0, 1)  # (B, 3, S, S)
    return n[0] if single else n


# --- modality assembly -----------------------------------------------------

def assemble_modality(source, preset: str) -> PatchTensor:
    """Select the preset's planes, in canonical R, G, B, D, Nx, Ny, Nz order.

    ``source`` is a PatchTensor or a mapping from channel name to plane.
    """
    if preset not in MODALITIES:
        raise ConfigurationError(f"unknown modality {preset!r}; expected one of {list(MODALITIES)}")
    wanted = MODALITIES[preset]
    if isinstance(source, PatchTensor):
        lookup = {c: source.planes[i] for i, c in enumerate(source.channels)}
        mask = source.mask
    else:
        lookup, mask = dict(source), None
    missing = [c for c in wanted if c not in lookup]
    if missing:
        raise ConfigurationError(f"modality {preset} needs planes {missing}")
    return PatchTensor(np.stack([np.asarray(lookup[c], dtype=np.float32) for c in wanted]),
                       wanted, mask)


def network_input(planes: np.ndarray, preset: str, channels: Sequence[str] = CHANNELS) -> np.ndarray:
    """Batch (B, C_all, S, S) of raw planes -> (B, C, S, S) network input.

    RGB planes are standardized per patch here, after any background fill.
    """
    wanted = MODALITIES[preset]
    idx = [list(channels).index(c) for c in wanted]
    x = np.asarray(planes, dtype=np.float32)[:, idx].copy()
    rgb = [i for i, c in enumerate(wanted) if c in ("R", "G", "B")]
    if rgb:
        x[:, rgb] = normalize_rgb(x[:, rgb])
    return x
