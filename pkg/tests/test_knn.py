import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripose.knn import (DatabaseFormatError, DescriptorDB, EmptyDatabaseError, QueryBoundsError,
                         build_db)
from tripose.embed import EmbeddingNet
from tripose.imaging import ConfigurationError


def _db(rng, n=200, d=3, method="kdtree", ties=False):
    desc = rng.normal(size=(n, d))
    if ties:
        desc = np.round(desc)  # many duplicate points and equal distances
    q = rng.normal(size=(n, 4)); q /= np.linalg.norm(q, axis=1, keepdims=True)
    return DescriptorDB(desc, rng.integers(0, 4, n), q, method)


def _reference(desc, q, k):
    d2 = [(float(np.sum((x - q) ** 2)), i) for i, x in enumerate(desc)]
    d2.sort()
    return d2[:k]


@pytest.mark.parametrize("ties", [False, True])
@pytest.mark.parametrize("d", [3, 16])
def test_tree_matches_brute_and_reference(rng, d, ties):
    db = _db(rng, 300, d, ties=ties)
    brute = DescriptorDB(db.descriptors, db.class_ids, db.quats, "brute")
    assert db.method == "kdtree"
    for q in rng.normal(size=(100, d)):
        q = np.round(q) if ties else q
        for k in (1, 5):
            dt, it = db.query(q, k)
            db_, ib = brute.query(q, k)
            assert np.array_equal(it, ib) and np.array_equal(dt, db_)
            ref = _reference(db.descriptors, q, k)
            assert [i for _, i in ref] == it.tolist()


def test_batch_matches_single(rng):
    db = _db(rng, 150, 3)
    qs = rng.normal(size=(40, 3))
    d, i = db.query_batch(qs, 3)
    for r, q in enumerate(qs):
        ds, is_ = db.query(q, 3)
        assert np.array_equal(is_, i[r])
        assert np.allclose(ds, d[r])


def test_exact_entry_first(rng):
    db = _db(rng)
    d, i = db.query(db.descriptors[17], 1)
    assert i[0] == 17 and d[0] == 0.0


def test_k_equals_n_returns_all_sorted(rng):
    db = _db(rng, 50)
    d, i = db.query(np.zeros(3), 50)
    assert sorted(i.tolist()) == list(range(50))
    assert np.all(np.diff(d) >= 0)


def test_bounds_and_empty(rng):
    db = _db(rng, 10)
    with pytest.raises(QueryBoundsError):
        db.query(np.zeros(3), 0)
    with pytest.raises(QueryBoundsError):
        db.query(np.zeros(3), 11)
    with pytest.raises(EmptyDatabaseError):
        DescriptorDB(np.zeros((0, 3)), [], np.zeros((0, 4)))
    with pytest.raises(ValueError):
        DescriptorDB(np.array([[np.nan, 0, 0]]), [0], np.array([[1.0, 0, 0, 0]]))


def test_auto_method():
    q = np.tile([1.0, 0, 0, 0], (5, 1))
    assert DescriptorDB(np.zeros((5, 16)), np.zeros(5), q).method == "kdtree"
    assert DescriptorDB(np.zeros((5, 32)), np.zeros(5), q).method == "brute"


def test_save_load_roundtrip(tmp_path, rng):
    db = _db(rng, 30)
    db.modality = "D"
    db.save(tmp_path / "db.bin")
    back = DescriptorDB.load(tmp_path / "db.bin")
    assert np.array_equal(back.descriptors, db.descriptors)
    assert np.array_equal(back.class_ids, db.class_ids)
    assert np.array_equal(back.quats, db.quats)
    assert back.modality == "D"
    raw = (tmp_path / "db.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-9])
    with pytest.raises(DatabaseFormatError):
        DescriptorDB.load(tmp_path / "cut.bin")
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(DatabaseFormatError):
        DescriptorDB.load(tmp_path / "junk.bin")


def test_build_db(tiny_sets):
    _, templates, _ = tiny_sets
    net = EmbeddingNet(4, 24, 3).init_params(0)
    db = build_db(net, templates)
    assert len(db) == len(templates)
    assert np.array_equal(db.descriptors, build_db(net, templates).descriptors)
    with pytest.raises(ConfigurationError):
        build_db(net, templates.subset(np.arange(0)))
    with pytest.raises(ConfigurationError):
        build_db(EmbeddingNet(1, 24, 3).init_params(0), templates)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_tree_property(seed, k):
    r = np.random.default_rng(seed)
    db = _db(r, 64, 3, ties=bool(seed % 2))
    brute = DescriptorDB(db.descriptors, db.class_ids, db.quats, "brute")
    q = np.round(r.normal(size=3)) if seed % 2 else r.normal(size=3)
    assert np.array_equal(db.query(q, k)[1], brute.query(q, k)[1])
