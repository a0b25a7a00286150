import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripose.geometry import (GeometryError, Quaternion, enumerate_poses, icosphere, in_plane_angles,
                              look_at_pose, quat_angle, quat_angles, quat_from_axis_angle,
                              quat_multiply, quat_to_matrix, random_quaternions,
                              subdivide_icosahedron)


def _matrix_angle(qa, qb):
    """Rotation angle from the trace of Ra^T Rb; independent of the quaternion dot product."""
    r = quat_to_matrix(qa).T @ quat_to_matrix(qb)
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def _dedup_count(level):
    v, _ = icosphere(level)
    return len({tuple(np.round(p, 9)) for p in v})


@pytest.mark.parametrize("level,count", [(0, 12), (1, 42), (2, 162), (3, 642)])
def test_full_sphere_vertex_counts(level, count):
    v, f = icosphere(level)
    assert len(v) == count == 10 * 4 ** level + 2
    assert _dedup_count(level) == count
    assert len(f) == 20 * 4 ** level
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)


@pytest.mark.parametrize("level,count", [(0, 8), (1, 25), (2, 89), (3, 337)])
def test_hemisphere_counts_include_equator(level, count):
    s = subdivide_icosahedron(level)
    assert len(s) == count
    assert s.vertices[:, 2].min() >= -1e-9
    full = subdivide_icosahedron(level, hemisphere_only=False)
    assert np.sum(full.vertices[:, 2] >= -1e-9) == count


def test_bad_level():
    with pytest.raises(GeometryError):
        subdivide_icosahedron(-1)
    with pytest.raises(GeometryError):
        subdivide_icosahedron(99)


def test_pose_enumeration_counts():
    s = subdivide_icosahedron(2, hemisphere_only=False)
    assert len(enumerate_poses(s, -45, 45, 15)) == 162 * 7
    assert in_plane_angles(-45, 45, 90) == [-45.0, 45.0]
    assert in_plane_angles(0, 0, 15) == [0.0]
    with pytest.raises(GeometryError):
        in_plane_angles(10, 0, 15)
    with pytest.raises(GeometryError):
        in_plane_angles(0, 10, 0)


def test_enumerated_poses_distinct():
    poses = enumerate_poses(subdivide_icosahedron(1), -45, 45, 15)
    q = np.array([p.orientation.as_array() for p in poses])
    dots = np.abs(q @ q.T)
    np.fill_diagonal(dots, 0)
    assert dots.max() < 1 - 1e-9


def test_quat_angle_examples():
    ident = Quaternion.identity()
    assert quat_angle(ident, ident) == 0.0
    z90 = Quaternion(np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4))
    assert quat_angle(ident, z90) == pytest.approx(np.pi / 2, abs=1e-12)
    assert _matrix_angle(ident.as_array(), z90.as_array()) == pytest.approx(np.pi / 2, abs=1e-9)
    x180 = Quaternion(0.0, 1.0, 0.0, 0.0)
    assert quat_angle(ident, x180) == pytest.approx(np.pi, abs=1e-12)
    assert quat_angle(ident, z90 * z90) == pytest.approx(np.pi, abs=1e-7)


def test_axis_angle():
    assert quat_from_axis_angle([0, 0, 1], 0.0).as_array() == pytest.approx([1, 0, 0, 0])
    assert quat_from_axis_angle([0, 0, 1], np.pi).as_array() == pytest.approx([0, 0, 0, 1], abs=1e-15)
    with pytest.raises(GeometryError):
        quat_from_axis_angle([0, 0, 2], 1.0)


def test_non_unit_rejected():
    with pytest.raises(GeometryError):
        Quaternion(1.0, 1.0, 0.0, 0.0)


def test_quat_angle_matches_matrix_oracle(rng):
    qa, qb = random_quaternions(rng, 1000), random_quaternions(rng, 1000)
    for a, b in zip(qa, qb):
        got = quat_angle(Quaternion.from_array(a), Quaternion.from_array(b))
        assert abs(got - _matrix_angle(a, b)) < 1e-6


unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(Quaternion.from_array)


@settings(max_examples=200, deadline=None)
@given(unit_quats, unit_quats, unit_quats)
def test_quat_angle_is_a_metric(a, b, c):
    ab, ba = quat_angle(a, b), quat_angle(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert 0.0 <= ab <= np.pi + 1e-12
    assert quat_angle(-a, b) == pytest.approx(ab, abs=1e-12)
    assert quat_angle(a, c) <= ab + quat_angle(b, c) + 1e-6


@settings(max_examples=100, deadline=None)
@given(unit_quats, unit_quats)
def test_composition_matches_matrix_product(a, b):
    m = quat_to_matrix(quat_multiply(a.as_array(), b.as_array()))
    assert np.allclose(m, a.to_matrix() @ b.to_matrix(), atol=1e-9)


def test_quat_angles_vectorized(rng):
    q = random_quaternions(rng, 50)
    got = quat_angles(q[0], q)
    ref = [quat_angle(Quaternion.from_array(q[0]), Quaternion.from_array(x)) for x in q]
    assert np.allclose(got, ref, atol=1e-9)


def test_look_at_pose_points_at_origin():
    p = look_at_pose([0.3, -0.2, 0.9], 0.6, in_plane_deg=30)
    r = p.rotation()
    # camera looks down its -z axis toward the origin
    assert np.allclose(r @ [0, 0, -1], -np.asarray(p.position) / p.distance, atol=1e-9)
    assert p.distance == pytest.approx(0.6)
    p0 = look_at_pose([0.3, -0.2, 0.9], 0.6, in_plane_deg=0)
    assert quat_angle(p.orientation, p0.orientation) == pytest.approx(np.radians(30), abs=1e-9)


def test_look_at_pole():
    p = look_at_pose([0, 0, 1])
    assert np.allclose(p.rotation() @ [0, 0, 1], [0, 0, 1], atol=1e-9)
