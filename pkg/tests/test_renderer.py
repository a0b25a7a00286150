import numpy as np
import pytest

from tripose.geometry import Quaternion, look_at_pose, random_quaternions
from tripose.renderer import (MeshError, RenderError, TriMesh, make_procedural_mesh, mesh_center,
                              perturb_to_pseudo_real, read_pgm16, read_ppm, render,
                              render_clutter_scene, write_pgm16, write_ppm, MESH_KINDS)


def test_sphere_mesh_radius():
    m = make_procedural_mesh("sphere", 0.1, 7)
    r = np.linalg.norm(m.vertices - mesh_center(m.vertices), axis=1)
    assert np.allclose(r, 0.1, atol=1e-6)


def test_box_topology():
    m = make_procedural_mesh("box", 0.2, 1)
    assert m.vertices.shape == (8, 3) and len(m.triangles) == 12


@pytest.mark.parametrize("kind", MESH_KINDS)
def test_meshes_valid_and_deterministic(kind):
    a = make_procedural_mesh(kind, 0.15, 3, asymmetry=0.2)
    b = make_procedural_mesh(kind, 0.15, 3, asymmetry=0.2)
    a.validate()
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.colors, b.colors)
    top = np.abs(a.vertices).max()
    assert 0.9 * 0.15 < top <= 0.15 + 1e-12
    # closed and outward: signed volume is positive
    v, t = a.vertices, a.triangles
    vol = np.einsum("ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6
    assert vol > 0


def test_mesh_errors():
    with pytest.raises(MeshError):
        make_procedural_mesh("teapot")
    with pytest.raises(MeshError):
        make_procedural_mesh("box", 0.5)
    big = make_procedural_mesh("box", 0.3)
    with pytest.raises(MeshError):
        big.validate()


def test_sphere_center_depth_analytic():
    m = make_procedural_mesh("sphere", 0.1, 7)
    v = render(m, look_at_pose([0, 0, 1], 0.6), 64, 64.0)
    # the four pixels around the optical axis sit within half a pixel of it
    c = v.depth[31:33, 31:33]
    assert np.all(np.abs(c - 0.5) < 1e-3)
    assert v.depth[0, 0] == 0 and not v.rgb[0, 0].any()


def test_relative_pose_symmetry(rng):
    m = make_procedural_mesh("star", 0.15, 2)
    pose = look_at_pose([0.2, 0.4, 0.8], 0.6, 20)
    q = Quaternion.from_array(random_quaternions(rng, 1)[0])
    rot = q.to_matrix()
    moved = TriMesh(m.vertices @ rot.T, m.triangles, m.colors)
    cam_r = rot @ pose.rotation()
    from tripose.geometry import CameraPose, matrix_to_quat
    pose2 = CameraPose(matrix_to_quat(cam_r), tuple(rot @ np.asarray(pose.position)), 0.0)
    a = render(m, pose, 64, 80.0).depth
    b = render(moved, pose2, 64, 80.0).depth
    assert np.abs(a - b).max() < 1e-6


def test_render_errors():
    m = make_procedural_mesh("box", 0.1)
    with pytest.raises(RenderError):
        render(m, look_at_pose([0, 0, 1]), 8)
    with pytest.raises(RenderError):
        render(m, look_at_pose([0, 0, 1]), 32, 0.0)


def _view():
    m = make_procedural_mesh("box", 0.17, 4)
    return render(m, look_at_pose([0.3, 0.3, 0.9], 0.6), 64, 90.0)


def test_perturb_identity_and_determinism():
    v = _view()
    same = perturb_to_pseudo_real(v, 1, 0.0, 0.0, 0.0)
    assert np.array_equal(same.depth, v.depth) and np.array_equal(same.rgb, v.rgb)
    a = perturb_to_pseudo_real(v, 5, 0.003, 0.1, 0.1)
    b = perturb_to_pseudo_real(v, 5, 0.003, 0.1, 0.1)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.rgb, b.rgb)


def test_dropout_count():
    # synthetic view with exactly 1000 foreground pixels
    depth = np.zeros((50, 50)); depth.ravel()[:1000] = 0.6
    from tripose.renderer import RenderedView
    v = RenderedView(np.zeros((50, 50, 3)), depth, Quaternion.identity())
    zeroed = [int(np.sum(perturb_to_pseudo_real(v, s, 0.0, 0.2).depth[v.foreground] == 0))
              for s in range(20)]
    assert all(abs(z - 200) <= 30 for z in zeroed)


def test_clutter_scene_and_pnm_roundtrip(tmp_path):
    rgb, depth = render_clutter_scene(3, 64, 90.0)
    assert rgb.shape == (64, 64, 3) and depth.shape == (64, 64)
    assert depth.min() > 0  # the back wall covers every pixel
    write_ppm(tmp_path / "a.ppm", rgb); write_pgm16(tmp_path / "a.pgm", depth)
    assert np.abs(read_ppm(tmp_path / "a.ppm") - rgb).max() <= 0.5 / 255 + 1e-12
    assert np.abs(read_pgm16(tmp_path / "a.pgm") - depth).max() <= 0.0005 + 1e-12
