import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tripose.geometry import Quaternion, quat_from_axis_angle
from tripose.imaging import Sample, PatchTensor
from tripose.loss import (LossConfigError, TripletInvariantError, check_triplets, dynamic_margin,
                          dynamic_margins, pair_loss, total_loss, triplet_loss)

from _fd import rel_err


def _sample(c, q):
    return Sample(PatchTensor(np.zeros((1, 2, 2)), ("D",)), c, q)


def test_triplet_examples():
    z = np.zeros(3)
    assert triplet_loss(z, z, z, 0.3) == 1.0
    assert triplet_loss([0, 0], [1, 0], [2, 0], 1.0) == 0.0
    assert triplet_loss([0, 0], [1, 0], [0, 1], 1.0) == 0.5
    with pytest.raises(LossConfigError):
        triplet_loss(z, z, z, 0.0)


def test_pair_examples():
    assert pair_loss([1, 2], [1, 2]) == 0.0
    assert pair_loss([1, 0, 0], [0, 1, 0]) == 2.0
    a, b = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    assert pair_loss(2 * a, 2 * b) == pytest.approx(4 * pair_loss(a, b))


def test_dynamic_margin_examples():
    ident = Quaternion.identity()
    z30 = quat_from_axis_angle([0, 0, 1], np.pi / 6)
    assert dynamic_margin(_sample(0, ident), _sample(0, z30)) == pytest.approx(0.5236, abs=1e-4)
    assert dynamic_margin(_sample(0, ident), _sample(1, z30)) == pytest.approx(2 * np.pi)
    assert dynamic_margin(_sample(0, ident), _sample(0, ident)) == 0.0
    with pytest.raises(LossConfigError):
        dynamic_margin(_sample(0, ident), _sample(1, ident), n=np.pi)


def test_dynamic_margins_vectorized(rng):
    q = rng.normal(size=(20, 4)); q /= np.linalg.norm(q, axis=1, keepdims=True)
    p = rng.normal(size=(20, 4)); p /= np.linalg.norm(p, axis=1, keepdims=True)
    ca, cb = rng.integers(0, 2, 20), rng.integers(0, 2, 20)
    got = dynamic_margins(ca, q, cb, p)
    ref = [dynamic_margin(_sample(a, Quaternion.from_array(x)), _sample(b, Quaternion.from_array(y)))
           for a, b, x, y in zip(ca, cb, q, p)]
    assert np.allclose(got, ref, atol=1e-9)


def test_zero_margin_triplet_rejected():
    q = np.array([[1.0, 0, 0, 0]] * 3)
    with pytest.raises(TripletInvariantError):
        check_triplets(np.array([[0, 1, 2]]), np.array([0, 0, 0]), q, np.array([0.0]))


def test_pusher_closer_than_puller_rejected():
    z = lambda a: quat_from_axis_angle([0, 0, 1], a).as_array()
    q = np.array([z(0), z(0.5), z(0.1)])
    with pytest.raises(TripletInvariantError):
        check_triplets(np.array([[0, 1, 2]]), np.zeros(3, int), q, np.array([0.1]))
    with pytest.raises(TripletInvariantError):
        check_triplets(np.array([[0, 1, 2]]), np.array([0, 1, 0]), q, np.array([0.1]))
    check_triplets(np.array([[0, 2, 1]]), np.zeros(3, int), q, np.array([0.5]))


def test_inactive_hinges_give_zero():
    f = np.array([[0.0, 0], [0.1, 0], [10, 0]])
    loss, g = total_loss(f, [[0, 1, 2]], [1.0], np.zeros((0, 2)))
    assert loss == 0.0 and not g.any()


def test_single_pair_gradient():
    f = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 1.0]])
    loss, g = total_loss(f, np.zeros((0, 3)), [], [[0, 1]])
    assert loss == pytest.approx(pair_loss(f[0], f[1]))
    assert np.allclose(g[0], 2 * (f[0] - f[1]))
    assert np.allclose(g[1], -2 * (f[0] - f[1]))


def test_needs_terms():
    with pytest.raises(LossConfigError):
        total_loss(np.zeros((2, 3)), np.zeros((0, 3)), [], np.zeros((0, 2)))


def _numeric(f, trip, m, pairs, eps=1e-6):
    g = np.zeros_like(f)
    for idx in np.ndindex(f.shape):
        fp, fm = f.copy(), f.copy()
        fp[idx] += eps; fm[idx] -= eps
        g[idx] = (total_loss(fp, trip, m, pairs)[0] - total_loss(fm, trip, m, pairs)[0]) / (2 * eps)
    return g


def test_descriptor_gradient_matches_fd(rng):
    for _ in range(10):
        f = rng.normal(size=(6, 3))
        trip = np.array([[0, 1, 2], [3, 4, 5], [1, 0, 4]])
        m = rng.uniform(0.5, 6, 3)
        pairs = np.array([[0, 5], [2, 3]])
        loss, g = total_loss(f, trip, m, pairs)
        ref = sum(triplet_loss(f[i], f[j], f[k], mm) for (i, j, k), mm in zip(trip, m)) + \
            sum(pair_loss(f[p], f[q]) for p, q in pairs)
        assert loss == pytest.approx(ref)
        assert rel_err(g, _numeric(f, trip, m, pairs)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(1e-3, 10))
def test_triplet_loss_bounded(f, m):
    v = triplet_loss(f[0], f[1], f[2], m)
    assert 0.0 <= v <= 1.0
