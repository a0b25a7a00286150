"""Quaternions, icosahedral view spheres and camera pose enumeration.

Quaternions use the (w, x, y, z) convention. Camera orientations map camera
coordinates to world coordinates; the camera looks along its local -z axis
with +y up (OpenGL style).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

UNIT_TOL = 1e-9
MAX_LEVEL = 6


class GeometryError(ValueError):
    """Raised on invalid geometric input (non-unit quaternion, bad level...)."""


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
        if abs(n - 1.0) > UNIT_TOL:
            raise GeometryError(f"quaternion is not unit norm (|q|^2={n!r})")

    @classmethod
    def from_array(cls, a, normalize: bool = True) -> "Quaternion":
        a = np.asarray(a, dtype=np.float64)
        if normalize:
            n = np.linalg.norm(a)
            if n == 0.0:
                raise GeometryError("cannot normalize a zero quaternion")
            a = a / n
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def rotate(self, v) -> np.ndarray:
        return quat_to_matrix(self.as_array()) @ np.asarray(v, dtype=np.float64)

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> Quaternion:
    """Convert a rotation matrix to a unit quaternion with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0:
        q = -q
    return Quaternion.from_array(q)


def _check_unit(q: Quaternion) -> np.ndarray:
    a = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=np.float64)
    if abs(a @ a - 1.0) > UNIT_TOL:
        raise GeometryError("quaternion is not unit norm")
    return a


def quat_angle(a: Quaternion, b: Quaternion) -> float:
    """Rotation angle in radians separating two orientations, in [0, pi].

    Invariant under q -> -q for either argument.
    """
    d = abs(float(_check_unit(a) @ _check_unit(b)))
    return 2.0 * float(np.arccos(min(d, 1.0)))


def quat_angles(q: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Vectorized ``quat_angle`` of one (4,) array against an (N, 4) array."""
    d = np.abs(np.asarray(others, dtype=np.float64) @ np.asarray(q, dtype=np.float64))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def quat_from_axis_angle(axis, angle: float) -> Quaternion:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0 or abs(n - 1.0) > UNIT_TOL:
        raise GeometryError(f"rotation axis must be unit length, got |axis|={n}")
    s = np.sin(angle / 2.0)
    return Quaternion.from_array(np.r_[np.cos(angle / 2.0), axis * s])


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed unit quaternions as an (n, 4) array."""
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# --- view sphere -----------------------------------------------------------

@dataclass(frozen=True)
class ViewSphere:
    vertices: np.ndarray = field(repr=False)
    level: int
    hemisphere_only: bool

    def __len__(self):
        return len(self.vertices)


def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return [tuple(v) for v in verts], faces


def icosphere(level: int):
    """Vertices (V, 3) and faces (F, 3) of the subdivided unit icosahedron."""
    if not isinstance(level, (int, np.integer)) or level < 0 or level > MAX_LEVEL:
        raise GeometryError(f"subdivision level must be in [0, {MAX_LEVEL}], got {level!r}")
    verts, faces = _icosahedron()
    for _ in range(level):
        cache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = np.add(verts[i], verts[j]) / 2.0
                m /= np.linalg.norm(m)
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def subdivide_icosahedron(level: int, hemisphere_only: bool = True) -> ViewSphere:
    """Camera directions from a recursively 4-way subdivided icosahedron.

    Edge midpoints are shared between neighbouring faces and pushed back onto
    the unit sphere. With ``hemisphere_only`` the vertices with z >= -1e-9
    (upper half, equator included) are kept.
    """
    v, _ = icosphere(level)
    if hemisphere_only:
        v = v[v[:, 2] >= -1e-9]
    return ViewSphere(vertices=v, level=int(level), hemisphere_only=hemisphere_only)


# --- camera poses ----------------------------------------------------------

@dataclass(frozen=True)
class CameraPose:
    orientation: Quaternion
    position: tuple
    in_plane_deg: float

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.position))

    def rotation(self) -> np.ndarray:
        return self.orientation.to_matrix()


def look_at_pose(direction, radius_m: float = 0.6, in_plane_deg: float = 0.0) -> CameraPose:
    """Camera on ``direction * radius`` looking at the origin, rolled about its optical axis."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    forward = -d
    up = np.array([0.0, 0.0, 1.0])
    if np.linalg.norm(np.cross(forward, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    r = np.column_stack([right, cam_up, -forward])
    a = np.deg2rad(in_plane_deg)
    roll = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    q = matrix_to_quat(r @ roll)
    return CameraPose(orientation=q, position=tuple(d * radius_m), in_plane_deg=float(in_plane_deg))


def in_plane_angles(min_deg: float, max_deg: float, stride_deg: float) -> List[float]:
    if stride_deg <= 0:
        raise GeometryError("in-plane stride must be positive")
    if min_deg > max_deg:
        raise GeometryError("in-plane range is empty (min > max)")
    n = int(np.floor((max_deg - min_deg) / stride_deg + 1e-9)) + 1
    return [float(min_deg + i * stride_deg) for i in range(n)]


def enumerate_poses(sphere: ViewSphere, in_plane_min_deg: float = -45.0,
                    in_plane_max_deg: float = 45.0, stride_deg: float = 15.0,
                    radius_m: float = 0.6) -> List[CameraPose]:
    angles = in_plane_angles(in_plane_min_deg, in_plane_max_deg, stride_deg)
    return [look_at_pose(v, radius_m, a) for v in sphere.vertices for a in angles]


def poses_as_array(poses: Sequence) -> np.ndarray:
    """Stack orientations (CameraPose or Quaternion) into an (N, 4) array."""
    return np.array([(p.orientation if isinstance(p, CameraPose) else p).as_array() for p in poses])
