"""Small z-buffered software rasterizer for procedural RGB-D views.

Pixel (i, j) has its center at (j + 0.5, i + 0.5); the principal point sits
at the image center. Depth images store the camera z-distance in meters and
0 where no surface was hit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit

from .geometry import CameraPose, Quaternion, icosphere

MESH_KINDS = ("sphere", "box", "cylinder", "cone", "torus", "star")
CUBE_HALF = 0.2
LIGHT_DIR = np.array([0.35, 0.25, 0.9]) / np.linalg.norm([0.35, 0.25, 0.9])
AMBIENT = 0.35


class MeshError(ValueError):
    pass


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    colors: np.ndarray = field(repr=False)
    name: str = ""

    def validate(self) -> None:
        v, t = self.vertices, self.triangles
        if t.min() < 0 or t.max() >= len(v):
            raise MeshError(f"{self.name}: triangle index out of range")
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        if area.min() <= 1e-12:
            raise MeshError(f"{self.name}: degenerate triangle (area {area.min():.3g})")
        extent = np.abs(v - mesh_center(v)).max()
        if extent > CUBE_HALF + 1e-12:
            raise MeshError(f"{self.name}: mesh does not fit the 0.4 m cube (half extent {extent:.3f} m)")

    def transformed(self, rotation: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices @ np.asarray(rotation).T, self.triangles, self.colors, self.name)


@dataclass
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    pose: Quaternion
    class_id: int = 0
    center_depth: float = 0.6
    focal_px: float = 64.0

    @property
    def foreground(self) -> np.ndarray:
        return self.depth > 0


# --- procedural meshes -----------------------------------------------------

def mesh_center(vertices: np.ndarray) -> np.ndarray:
    """Bounding-box center; procedural meshes are built around it."""
    return (vertices.min(axis=0) + vertices.max(axis=0)) / 2.0


def _ring(n, radius, z):
    a = np.arange(n) * 2 * np.pi / n
    return np.column_stack([radius * np.cos(a), radius * np.sin(a), np.full(n, z)])


def _prism(outline_bottom, outline_top, z0, z1):
    """Closed solid from two (n, 2) outlines with fan-triangulated caps."""
    n = len(outline_bottom)
    verts = np.vstack([
        np.column_stack([outline_bottom, np.full(n, z0)]),
        np.column_stack([outline_top, np.full(n, z1)]),
        [[0.0, 0.0, z0], [0.0, 0.0, z1]],
    ])
    bc, tc = 2 * n, 2 * n + 1
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, n + j), (i, n + j, n + i), (bc, j, i), (tc, n + i, n + j)]
    return verts, tris


def _cone(n, radius, h):
    verts = np.vstack([_ring(n, radius, -h / 2), [[0, 0, h / 2], [0, 0, -h / 2]]])
    apex, bc = n, n + 1
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, apex), (bc, j, i)]
    return verts, tris


def _torus(n_major, n_minor, r_major, r_minor):
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    x = (r_major + r_minor * np.cos(ww)) * np.cos(uu)
    y = (r_major + r_minor * np.cos(ww)) * np.sin(uu)
    z = r_minor * np.sin(ww)
    verts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    tris = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            tris += [(a, b, c), (a, c, d)]
    return verts, tris


def _orient_outward(verts, tris):
    """Flip triangles whose normal points toward the center (star-shaped solids only)."""
    v = np.asarray(verts)
    t = np.asarray(tris, dtype=np.int64)
    c = mesh_center(v)
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    fc = v[t].mean(axis=1) - c
    flip = np.einsum("ij,ij->i", n, fc) < 0
    t[flip] = t[flip][:, [0, 2, 1]]
    return t


def _displace(verts, s, amount, seed):
    rng = np.random.default_rng([seed, 0xA5])
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    field = np.cos(np.pi * (verts @ dirs.T) / s + phase).mean(axis=1)
    # push along the direction from the center; a sheared offset breaks mirror symmetry too
    r = np.linalg.norm(verts, axis=1, keepdims=True)
    out = verts + amount * s * field[:, None] * verts / np.maximum(r, 1e-12)
    out = out + amount * 0.5 * (verts[:, 2:3] / s) * s * np.array([1.0, 0.5, 0.0])
    out = out - mesh_center(out)
    return out * (np.abs(verts).max() / np.abs(out).max())


def make_procedural_mesh(kind: str, scale_m: float = 0.1, color_seed: int = 0,
                         asymmetry: float = 0.0) -> TriMesh:
    """Build a closed primitive whose largest half extent is ``scale_m``.

    For the sphere, ``scale_m`` is the radius; the star's points reach
    0.95 of it after re-centering. Meshes are re-centered on their
    bounding-box center. Vertex colors are a seeded base color modulated by a
    smooth seeded color wave plus small per-vertex jitter.

    ``asymmetry`` > 0 adds a seeded low-frequency radial displacement of that
    relative size, so that the primitive no longer looks the same from
    symmetric viewpoints; the largest half extent is kept at ``scale_m``.
    """
    if not 0.0 <= asymmetry <= 0.5:
        raise MeshError(f"asymmetry must be in [0, 0.5], got {asymmetry}")
    if not 0.05 < scale_m <= 0.35:
        raise MeshError(f"scale_m must be in (0.05, 0.35], got {scale_m}")
    s = float(scale_m)
    if kind == "sphere":
        verts, tris = icosphere(2)
        verts = verts * s
    elif kind == "box":
        c = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
        verts = c * np.array([s, 0.7 * s, 0.5 * s])
        tris = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
                (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    elif kind == "cylinder":
        ring = _ring(24, 0.55 * s, 0)[:, :2]
        verts, tris = _prism(ring, ring, -s, s)
    elif kind == "cone":
        verts, tris = _cone(24, 0.8 * s, 2 * s)
    elif kind == "torus":
        verts, tris = _torus(24, 12, 0.7 * s, 0.3 * s)
    elif kind == "star":
        a = np.arange(10) * np.pi / 5
        r = np.where(np.arange(10) % 2 == 0, s, 0.45 * s)
        outline = np.column_stack([r * np.cos(a), r * np.sin(a)])
        verts, tris = _prism(outline, outline, -0.35 * s, 0.35 * s)
    else:
        raise MeshError(f"unknown mesh kind {kind!r}; expected one of {MESH_KINDS}")
    verts = np.asarray(verts, dtype=np.float64)
    verts = verts - mesh_center(verts)
    if kind == "sphere":
        verts = verts / np.linalg.norm(verts, axis=1, keepdims=True) * s
    if asymmetry > 0:
        verts = _displace(verts, s, asymmetry, color_seed)
    if kind == "torus":
        tris = np.asarray(tris, dtype=np.int64)  # parametric winding is already outward
    else:
        tris = _orient_outward(verts, tris)
    rng = np.random.default_rng(color_seed)
    base = rng.uniform(0.3, 0.9, size=3)
    # one low-frequency color wave per channel along a seeded direction, so that
    # rotationally symmetric primitives still look different from different sides
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    wave = 0.3 * np.cos(np.pi * (verts @ dirs.T) / s + phase)
    colors = np.clip(base + wave + rng.uniform(-0.05, 0.05, size=(len(verts), 3)), 0.0, 1.0)
    return TriMesh(verts, tris, colors, name=f"{kind}:{scale_m}:{color_seed}")


# --- rasterization ---------------------------------------------------------

@njit(cache=True)
def _raster_kernel(pts, tris, face_rgb, h, w, focal, rgb, depth):
    cx = w / 2.0
    cy = h / 2.0
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        z0 = -pts[i0, 2]
        z1 = -pts[i1, 2]
        z2 = -pts[i2, 2]
        if z0 <= 1e-6 or z1 <= 1e-6 or z2 <= 1e-6:
            continue
        x0 = cx + focal * pts[i0, 0] / z0
        y0 = cy - focal * pts[i0, 1] / z0
        x1 = cx + focal * pts[i1, 0] / z1
        y1 = cy - focal * pts[i1, 1] / z1
        x2 = cx + focal * pts[i2, 0] / z2
        y2 = cy - focal * pts[i2, 1] / z2
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        jmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        jmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), w - 1)
        imin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        imax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), h - 1)
        for i in range(imin, imax + 1):
            py = i + 0.5
            for j in range(jmin, jmax + 1):
                px = j + 0.5
                b0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                b1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                b2 = 1.0 - b0 - b1
                if b0 < 0.0 or b1 < 0.0 or b2 < 0.0:
                    continue
                # perspective-correct depth: 1/z is affine in screen space
                z = 1.0 / (b0 / z0 + b1 / z1 + b2 / z2)
                if depth[i, j] == 0.0 or z < depth[i, j]:
                    depth[i, j] = z
                    rgb[i, j, 0] = face_rgb[t, 0]
                    rgb[i, j, 1] = face_rgb[t, 1]
                    rgb[i, j, 2] = face_rgb[t, 2]


def shade_faces(vertices_world, triangles, colors) -> np.ndarray:
    """Flat per-face colors: mean vertex color times ambient + Lambert term."""
    v = vertices_world
    n = np.cross(v[triangles[:, 1]] - v[triangles[:, 0]], v[triangles[:, 2]] - v[triangles[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    lam = np.clip(n @ LIGHT_DIR, 0.0, 1.0)
    base = colors[triangles].mean(axis=1)
    return np.clip(base * (AMBIENT + (1 - AMBIENT) * lam)[:, None], 0.0, 1.0)


def rasterize(points_cam, triangles, face_rgb, image_size: int, focal_px: float):
    """Rasterize camera-frame triangles (camera looks down -z). Returns (rgb, depth)."""
    rgb = np.zeros((image_size, image_size, 3), dtype=np.float64)
    depth = np.zeros((image_size, image_size), dtype=np.float64)
    _raster_kernel(np.ascontiguousarray(points_cam, dtype=np.float64),
                   np.ascontiguousarray(triangles, dtype=np.int64),
                   np.ascontiguousarray(face_rgb, dtype=np.float64),
                   image_size, image_size, float(focal_px), rgb, depth)
    return rgb, depth


def render(mesh: TriMesh, pose: CameraPose, image_size: int = 64, focal_px: float = 64.0,
           class_id: int = 0) -> RenderedView:
    if image_size < 16:
        raise RenderError("image_size must be >= 16")
    if focal_px <= 0:
        raise RenderError("focal length must be positive")
    mesh.validate()
    r = pose.rotation()
    pos = np.asarray(pose.position, dtype=np.float64)
    cam = (mesh.vertices - pos) @ r  # R^T (X - p) for row vectors
    face_rgb = shade_faces(mesh.vertices, mesh.triangles, mesh.colors)
    rgb, depth = rasterize(cam, mesh.triangles, face_rgb, image_size, focal_px)
    return RenderedView(rgb=rgb, depth=depth, pose=pose.orientation, class_id=class_id,
                        center_depth=float(np.linalg.norm(pos)), focal_px=float(focal_px))


def render_clutter_scene(seed: int, image_size: int, focal_px: float,
                         depth_range=(0.55, 1.2), n_objects=(3, 7),
                         object_scale=(0.051, 0.12)) -> tuple:
    """Random RGB-D clutter: a textured back plane plus procedural primitives.

    Used as a stand-in for sensor-captured background images.
    Returns (rgb, depth) with depth in meters.
    """
    rng = np.random.default_rng(seed)
    half = image_size / (2.0 * focal_px)
    all_pts, all_tris, all_rgb = [], [], []
    offset = 0
    # back plane, tilted, tessellated into a grid so it carries color variation
    zb = rng.uniform(0.85, depth_range[1])
    tilt = rng.uniform(-0.4, 0.4, size=2)
    g = 6
    ext = half * zb * 1.6
    xs = np.linspace(-ext, ext, g + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    gz = -(zb + tilt[0] * gx + tilt[1] * gy)
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    tris = []
    for i in range(g):
        for j in range(g):
            a, b, c, d = i * (g + 1) + j, (i + 1) * (g + 1) + j, (i + 1) * (g + 1) + j + 1, i * (g + 1) + j + 1
            tris += [(a, b, c), (a, c, d)]
    tris = np.array(tris)
    base = rng.uniform(0.2, 0.8, size=3)
    plane_rgb = np.clip(base + rng.uniform(-0.2, 0.2, size=(len(tris), 3)), 0, 1)
    all_pts.append(pts); all_tris.append(tris); all_rgb.append(plane_rgb)
    offset += len(pts)
    for _ in range(rng.integers(n_objects[0], n_objects[1] + 1)):
        kind = MESH_KINDS[rng.integers(len(MESH_KINDS))]
        mesh = make_procedural_mesh(kind, float(rng.uniform(*object_scale)), int(rng.integers(1 << 30)))
        z = rng.uniform(depth_range[0], zb)
        center = np.array([rng.uniform(-1, 1) * half * z, rng.uniform(-1, 1) * half * z, -z])
        q = rng.standard_normal(4)
        rot = Quaternion.from_array(q).to_matrix()
        world = mesh.vertices @ rot.T
        all_pts.append(world + center)
        all_tris.append(mesh.triangles + offset)
        all_rgb.append(shade_faces(world, mesh.triangles, mesh.colors))
        offset += len(mesh.vertices)
    return rasterize(np.vstack(all_pts), np.vstack(all_tris), np.vstack(all_rgb), image_size, focal_px)


def composite_background(view: RenderedView, bg_rgb: np.ndarray, bg_depth: np.ndarray) -> RenderedView:
    """Fill no-hit pixels of ``view`` with a background image of the same size."""
    fg = view.foreground
    rgb = np.where(fg[..., None], view.rgb, bg_rgb)
    depth = np.where(fg, view.depth, bg_depth)
    return RenderedView(rgb, depth, view.pose, view.class_id, view.center_depth, view.focal_px)


def perturb_to_pseudo_real(view: RenderedView, noise_seed: int, depth_sigma_m: float = 0.003,
                           dropout_rate: float = 0.0, rgb_jitter: float = 0.0) -> RenderedView:
    """Sensor-like corruption of the foreground of a rendered view.

    Gaussian depth noise, random depth dropout (dropped pixels become no-hit)
    and a per-channel RGB gain/offset jitter of relative size ``rgb_jitter``.
    """
    if not 0.0 <= dropout_rate < 0.5:
        raise ValueError("dropout_rate must be in [0, 0.5)")
    rng = np.random.default_rng(noise_seed)
    fg = view.foreground
    depth = view.depth.copy()
    rgb = view.rgb.copy()
    if depth_sigma_m > 0:
        depth[fg] += rng.normal(0.0, depth_sigma_m, size=int(fg.sum()))
    if dropout_rate > 0:
        drop = fg & (rng.random(depth.shape) < dropout_rate)
        depth[drop] = 0.0
    if rgb_jitter > 0:
        gain = 1.0 + rng.uniform(-rgb_jitter, rgb_jitter, size=3)
        off = rng.uniform(-rgb_jitter, rgb_jitter, size=3) * 0.5
        rgb[fg] = np.clip(rgb[fg] * gain + off, 0.0, 1.0)
    return RenderedView(rgb, depth, view.pose, view.class_id, view.center_depth, view.focal_px)


# --- debug dumps -----------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm16(path, depth_m: np.ndarray) -> None:
    """Depth in meters -> 16-bit big-endian PGM in millimeters."""
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + mm.tobytes())


def _read_pnm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    return magic, w, h, maxval, raw[pos:]


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_pnm(path)
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"{path}: expected 8-bit binary PPM")
    return np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0


def read_pgm16(path) -> np.ndarray:
    """16-bit PGM in millimeters -> depth in meters."""
    magic, w, h, maxval, body = _read_pnm(path)
    if magic != b"P5":
        raise ValueError(f"{path}: expected binary PGM")
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(body[: w * h * np.dtype(dtype).itemsize], dtype=dtype).reshape(h, w) / 1000.0


def dump_view(view: RenderedView, stem) -> None:
    write_ppm(f"{stem}.ppm", view.rgb)
    write_pgm16(f"{stem}.pgm", view.depth)
