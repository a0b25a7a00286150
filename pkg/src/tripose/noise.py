"""Background noise generators used to fill the empty background of synthetic patches.

Every generator returns planes in [0, 1] in the order R, G, B, D.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .imaging import CHANNELS, PatchTensor, depth_to_unit, estimate_normals

NOISE_KINDS = ("white", "shapes", "fractal", "real")
FILL_CHANNELS = ("R", "G", "B", "D")

_F2 = 0.5 * (np.sqrt(3.0) - 1.0)
_G2 = (3.0 - np.sqrt(3.0)) / 6.0
_GRAD2 = np.array([[1, 1], [-1, 1], [1, -1], [-1, -1], [1, 0], [-1, 0],
                   [0, 1], [0, -1], [1, 1], [-1, 1], [1, -1], [-1, -1]], dtype=np.float64)


class NoiseConfigError(ValueError):
    pass


BackgroundPool = List[Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "fractal"
    seed: int = 0
    octaves: int = 4
    persistence: float = 0.5
    base_frequency: Optional[float] = None
    count_range: Tuple[int, int] = (3, 8)
    pool: Optional[tuple] = None
    foreground_clutter: bool = False
    center_depth_m: float = 0.6
    cube_side_m: float = 0.4

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise NoiseConfigError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 1 <= self.octaves <= 8:
            raise NoiseConfigError("fractal octaves must be in [1, 8]")
        if not 0.0 < self.persistence <= 1.0:
            raise NoiseConfigError("fractal persistence must be in (0, 1]")
        if self.kind == "real" and not self.pool:
            raise NoiseConfigError("noise kind 'real' needs a non-empty background pool")

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.kind, seed, self.octaves, self.persistence, self.base_frequency,
                         self.count_range, self.pool, self.foreground_clutter,
                         self.center_depth_m, self.cube_side_m)


# --- white -----------------------------------------------------------------

def white_noise(size: int, channels: int = 4, seed=0) -> np.ndarray:
    if size < 1:
        raise NoiseConfigError("size must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.random((channels, size, size))


# --- simplex / fractal -----------------------------------------------------

def make_permutation(rng: np.random.Generator) -> np.ndarray:
    p = rng.permutation(256)
    return np.concatenate([p, p]).astype(np.int64)


@njit(cache=True)
def _simplex_kernel(x, y, perm, out):
    # x, y, out: (n, m); perm: (n, 512)
    for k in range(x.shape[0]):
        p = perm[k]
        for e in range(x.shape[1]):
            xin = x[k, e]
            yin = y[k, e]
            s = (xin + yin) * _F2
            i = np.floor(xin + s)
            j = np.floor(yin + s)
            t = (i + j) * _G2
            x0 = xin - (i - t)
            y0 = yin - (j - t)
            if x0 > y0:
                i1, j1 = 1, 0
            else:
                i1, j1 = 0, 1
            x1 = x0 - i1 + _G2
            y1 = y0 - j1 + _G2
            x2 = x0 - 1.0 + 2.0 * _G2
            y2 = y0 - 1.0 + 2.0 * _G2
            ii = int(i) & 255
            jj = int(j) & 255
            total = 0.0
            t0 = 0.5 - x0 * x0 - y0 * y0
            if t0 > 0:
                g = p[ii + p[jj]] % 12
                total += t0 ** 4 * (_GRAD2[g, 0] * x0 + _GRAD2[g, 1] * y0)
            t1 = 0.5 - x1 * x1 - y1 * y1
            if t1 > 0:
                g = p[ii + i1 + p[jj + j1]] % 12
                total += t1 ** 4 * (_GRAD2[g, 0] * x1 + _GRAD2[g, 1] * y1)
            t2 = 0.5 - x2 * x2 - y2 * y2
            if t2 > 0:
                g = p[ii + 1 + p[jj + 1]] % 12
                total += t2 ** 4 * (_GRAD2[g, 0] * x2 + _GRAD2[g, 1] * y2)
            out[k, e] = 70.0 * total


def simplex2(x: np.ndarray, y: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """2D simplex noise in roughly [-1, 1] on Perlin's skewed simplex grid.

    ``perm`` is a (512,) table, or (n, 512) with ``x``/``y`` shaped (n, ...) to
    evaluate n independent fields at once.
    """
    perm = np.asarray(perm, dtype=np.int64)
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    shape = x.shape
    n = 1 if perm.ndim == 1 else perm.shape[0]
    xs = np.ascontiguousarray(x).reshape(n, -1)
    ys = np.ascontiguousarray(y).reshape(n, -1)
    out = np.empty_like(xs)
    _simplex_kernel(xs, ys, np.ascontiguousarray(perm.reshape(n, -1)), out)
    return out.reshape(shape)


def simplex_lattice_points(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Input-space coordinates of the simplex grid corners (i, j) for 0 <= i, j < n."""
    i, j = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    t = (i + j) * _G2
    return (i - t).ravel(), (j - t).ravel()


def _fractal_planes(rng, n: int, size: int, octaves: int, persistence: float,
                    base_frequency: Optional[float]) -> np.ndarray:
    if octaves < 1:
        raise NoiseConfigError("octaves must be >= 1")
    if base_frequency is None:
        base_frequency = 2.0 / size
    perms = np.stack([make_permutation(rng) for _ in range(n)])
    offsets = rng.uniform(0, 256, size=(n, 2, 1, 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    total = np.zeros((n, size, size))
    amp, freq = 1.0, base_frequency
    for _ in range(octaves):
        total += amp * simplex2(xx * freq + offsets[:, 0], yy * freq + offsets[:, 1], perms)
        amp *= persistence
        freq *= 2.0
    lo = total.min(axis=(1, 2), keepdims=True)
    span = total.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 1e-12, (total - lo) / np.where(span > 1e-12, span, 1.0), 0.0)


def fractal_noise(size: int, channels: int = 4, seed=0, octaves: int = 4,
                  persistence: float = 0.5, base_frequency: Optional[float] = None) -> np.ndarray:
    """Sum of simplex octaves (frequency x2, amplitude x persistence), each plane rescaled to [0, 1].

    ``base_frequency`` is in cycles per pixel and defaults to 2 / size.
    """
    return _fractal_planes(np.random.default_rng(seed), channels, size, octaves,
                           persistence, base_frequency)


# --- random shapes ---------------------------------------------------------

def _shape_mask(rng, size, yy, xx):
    kind = rng.integers(3)
    cx, cy = rng.uniform(0, size, size=2)
    extent = rng.uniform(size / 10.0, size / 3.0)
    if kind == 0:
        w, h = extent, rng.uniform(size / 10.0, size / 3.0)
        return (np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= h)
    if kind == 1:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= extent ** 2
    a = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.4, 0.4, 3)
    px, py = cx + extent * np.cos(a), cy + extent * np.sin(a)
    inside = np.ones_like(xx, dtype=bool)
    sign = np.sign((px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0]))
    for k in range(3):
        ax, ay, bx, by = px[k], py[k], px[(k + 1) % 3], py[(k + 1) % 3]
        inside &= sign * ((bx - ax) * (yy - ay) - (by - ay) * (xx - ax)) >= 0
    return inside


def random_shapes(size: int, channels: int = 4, seed=0, count_range=(3, 8),
                  with_foreground: bool = False):
    """Filled rectangles, circles and triangles on black planes.

    Each shape gets one uniform value per channel, so its depth and colors are
    constant over its area. With ``with_foreground`` a second, independent
    layer of occluders is returned as ``(planes, occluder_planes, occluder_mask)``.
    """
    lo, hi = count_range
    if hi < lo or lo < 0:
        raise NoiseConfigError("count_range must be a non-empty [lo, hi] range")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    def layer():
        planes = np.zeros((channels, size, size))
        covered = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(lo, hi + 1))):
            m = _shape_mask(rng, size, yy, xx)
            planes[:, m] = rng.random(channels)[:, None]
            covered |= m
        return planes, covered

    planes, _ = layer()
    if not with_foreground:
        return planes
    occ, occ_mask = layer()
    return planes, occ, occ_mask


# --- real backgrounds ------------------------------------------------------

def real_background_crop(pool: Sequence[Tuple[np.ndarray, np.ndarray]], size: int, seed=0,
                         center_depth_m: float = 0.6, cube_side_m: float = 0.4) -> np.ndarray:
    """Random crop from a pool of (rgb HxWx3 in [0, 1], depth HxW meters) images.

    RGB and depth are cut at the same location; depth is mapped into patch
    units with the same cube mapping used for object patches.
    """
    if not pool:
        raise NoiseConfigError("background pool is empty")
    for rgb, depth in pool:
        if min(depth.shape) < size or rgb.shape[:2] != depth.shape:
            raise NoiseConfigError(f"background image {depth.shape} smaller than {size}x{size} "
                                   "or with mismatched RGB/depth sizes")
    rng = np.random.default_rng(seed)
    rgb, depth = pool[int(rng.integers(len(pool)))]
    h, w = depth.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    crop_rgb = np.moveaxis(rgb[top:top + size, left:left + size], -1, 0)
    crop_d = depth_to_unit(depth[top:top + size, left:left + size], center_depth_m, cube_side_m)
    return np.concatenate([crop_rgb, crop_d[None]], axis=0)


def load_background_pool(directory) -> BackgroundPool:
    """Load paired ``<stem>.ppm`` (RGB) + ``<stem>.pgm`` (16-bit mm depth) images."""
    from .renderer import read_pgm16, read_ppm
    directory = Path(directory)
    pool = []
    for ppm in sorted(directory.glob("*.ppm")):
        pgm = ppm.with_suffix(".pgm")
        if pgm.exists():
            pool.append((read_ppm(ppm), read_pgm16(pgm)))
    return pool


def save_background_pool(pool: BackgroundPool, directory) -> None:
    from .renderer import write_pgm16, write_ppm
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, (rgb, depth) in enumerate(pool):
        write_ppm(directory / f"bg{k:04d}.ppm", rgb)
        write_pgm16(directory / f"bg{k:04d}.pgm", depth)


def make_background_pool(n: int, size: int, focal_px: float, seed: int = 0) -> BackgroundPool:
    """Procedural clutter scenes standing in for captured RGB-D backgrounds."""
    from .renderer import render_clutter_scene
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [render_clutter_scene(int(s), size, focal_px) for s in seeds]


# --- fill ------------------------------------------------------------------

def generate(spec: NoiseSpec, size: int, seed=None) -> np.ndarray:
    """Noise planes (R, G, B, D) for ``spec``; ``seed`` overrides ``spec.seed``."""
    seed = spec.seed if seed is None else seed
    if spec.kind == "white":
        return white_noise(size, 4, seed)
    if spec.kind == "fractal":
        return fractal_noise(size, 4, seed, spec.octaves, spec.persistence, spec.base_frequency)
    if spec.kind == "shapes":
        return random_shapes(size, 4, seed, spec.count_range)
    return real_background_crop(spec.pool, size, seed, spec.center_depth_m, spec.cube_side_m)


def generate_batch(spec: NoiseSpec, size: int, count: int, seed) -> np.ndarray:
    """``count`` independent (R, G, B, D) noise stacks, shape (count, 4, size, size)."""
    if spec.kind == "white":
        return np.random.default_rng(seed).random((count, 4, size, size))
    if spec.kind == "fractal":
        planes = _fractal_planes(np.random.default_rng(seed), 4 * count, size, spec.octaves,
                                 spec.persistence, spec.base_frequency)
        return planes.reshape(count, 4, size, size)
    seeds = np.random.SeedSequence(seed).spawn(count)
    return np.stack([generate(spec, size, s) for s in seeds])


def fill_planes(planes: np.ndarray, channels: Sequence[str], mask: np.ndarray,
                spec: NoiseSpec, seed=None) -> np.ndarray:
    """Array-level fill used by both ``fill_background`` and online batch generation."""
    channels = list(channels)
    present = [c for c in FILL_CHANNELS if c in channels]
    if not present:
        raise NoiseConfigError("patch has neither RGB nor depth planes to fill")
    size = planes.shape[-1]
    seed = spec.seed if seed is None else seed
    noise = generate(spec, size, seed)
    out = planes.copy()
    bg = ~np.asarray(mask, dtype=bool)
    for c in present:
        i = channels.index(c)
        out[i][bg] = noise[FILL_CHANNELS.index(c)][bg]
    if spec.foreground_clutter and spec.kind == "shapes":
        _, occ, occ_mask = random_shapes(size, 4, [seed, 1], spec.count_range, with_foreground=True)
        for c in present:
            out[channels.index(c)][occ_mask] = occ[FILL_CHANNELS.index(c)][occ_mask]
        bg = bg | occ_mask
    if all(n in channels for n in ("Nx", "Ny", "Nz")) and "D" in channels:
        normals = estimate_normals(out[channels.index("D")], spec.cube_side_m,
                                   mask=np.ones_like(bg), center_depth_m=spec.center_depth_m)
        for k, n in enumerate(("Nx", "Ny", "Nz")):
            out[channels.index(n)][bg] = normals[k][bg]
    return out


def fill_background(patch: PatchTensor, mask: Optional[np.ndarray], spec: NoiseSpec) -> PatchTensor:
    """Replace background pixels (mask == 0) in every present plane.

    Object pixels are preserved bit for bit; background normals are
    recomputed from the filled depth when normal planes are present.
    """
    mask = patch.mask if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("fill_background: empty foreground mask, filling the whole patch",
                      RuntimeWarning, stacklevel=2)
    filled = fill_planes(patch.planes, patch.channels, mask, spec)
    return PatchTensor(filled.astype(patch.planes.dtype), patch.channels, mask.copy())


def fill_batch(planes: np.ndarray, masks: np.ndarray, spec: NoiseSpec, seed,
               channels: Sequence[str] = CHANNELS) -> np.ndarray:
    """Batched ``fill_planes`` over (B, C, S, S) planes and (B, S, S) masks.

    One noise draw per sample; object pixels are kept bit for bit.
    """
    channels = list(channels)
    present = [c for c in FILL_CHANNELS if c in channels]
    if not present:
        raise NoiseConfigError("patches have neither RGB nor depth planes to fill")
    b, _, s, _ = planes.shape
    if spec.foreground_clutter:
        seeds = np.random.SeedSequence(seed).spawn(b)
        return np.stack([fill_planes(planes[i], channels, masks[i], spec, seeds[i]) for i in range(b)])
    noise = generate_batch(spec, s, b, seed)
    out = planes.copy()
    bg = ~np.asarray(masks, dtype=bool)
    for c in present:
        i = channels.index(c)
        out[:, i] = np.where(bg, noise[:, FILL_CHANNELS.index(c)], out[:, i])
    if all(n in channels for n in ("Nx", "Ny", "Nz")) and "D" in channels:
        normals = estimate_normals(out[:, channels.index("D")], spec.cube_side_m,
                                   mask=np.ones_like(bg), center_depth_m=spec.center_depth_m)
        for k, n in enumerate(("Nx", "Ny", "Nz")):
            i = channels.index(n)
            out[:, i] = np.where(bg, normals[:, k], out[:, i])
    return out
