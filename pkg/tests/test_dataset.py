import json
import warnings

import numpy as np
import pytest

from tripose.dataset import (DatasetConfig, DatasetError, SampleSet, SetFormatError,
                             build_template_set, build_test_set, build_training_set,
                             export_manifest, load_set, nearest_template_angles, real_pool,
                             save_set, select_real_for_training)
from tripose.geometry import subdivide_icosahedron

from conftest import tiny_config


def test_template_count_oracle(tiny_sets, tiny_cfg):
    _, templates, _ = tiny_sets
    per_object = len(subdivide_icosahedron(tiny_cfg.coarse_level)) * 7
    assert len(templates) == tiny_cfg.num_classes * per_object
    templates.check_role(tiny_cfg.num_classes)


def test_level2_template_count():
    cfg = tiny_config(coarse_level=2, fine_level=3)
    from tripose.dataset import template_poses
    assert len(template_poses(cfg)) * 2 == 2 * 89 * 7


def test_template_background_is_empty(tiny_sets):
    _, t, _ = tiny_sets
    bg = ~t.masks
    assert np.all(t.planes[:, 3][bg] == 1.0)
    assert np.all(t.planes[:, :3].transpose(1, 0, 2, 3)[:, bg] == 0.0)
    assert np.all(t.origins == 0)


def test_template_poses_distinct(tiny_sets):
    _, t, _ = tiny_sets
    for c in np.unique(t.class_ids):
        q = t.quats[t.class_ids == c]
        dots = np.abs(q @ q.T)
        np.fill_diagonal(dots, 0)
        assert dots.max() < 1 - 1e-9


def test_real_fraction_split():
    cfg = tiny_config(real_per_object=100, background_images=2)
    templates = build_template_set(cfg)
    train = build_training_set(cfg, templates)
    assert int(np.sum(train.origins == 1)) == 100
    test = build_test_set(cfg, train)
    assert len(test) == 100
    used = set(train.sources[train.origins == 1].tolist())
    assert used.isdisjoint(test.sources.tolist())
    assert used | set(test.sources.tolist()) == set(range(200))


def test_selection_prefers_template_poses(tiny_cfg, tiny_sets):
    _, templates, _ = tiny_sets
    real = real_pool(tiny_cfg)
    chosen = select_real_for_training(real, templates, 0.5)
    dist = nearest_template_angles(real.quats, real.class_ids, templates)
    rejected = np.setdiff1d(np.arange(len(real)), chosen)
    assert dist[chosen].mean() < dist[rejected].mean()
    for c in np.unique(real.class_ids):
        sel = chosen[real.class_ids[chosen] == c]
        rej = rejected[real.class_ids[rejected] == c]
        assert dist[sel].max() <= dist[rej].min()


def test_synthetic_only_and_all_real():
    cfg = tiny_config(real_to_train=0.0)
    train = build_training_set(cfg)
    assert np.all(train.origins == 0)
    cfg1 = tiny_config(real_to_train=1.0)
    train1 = build_training_set(cfg1)
    with pytest.warns(RuntimeWarning):
        test = build_test_set(cfg1, train1)
    assert len(test) == 0


def test_test_set_is_real_and_disjoint(tiny_sets):
    train, _, test = tiny_sets
    test.check_role()
    assert set(train.sources[train.origins == 1]).isdisjoint(test.sources.tolist())
    assert train.meta["coverage_gap_deg"] > 0


def test_roundtrip_and_corruption(tmp_path, tiny_sets):
    train, _, _ = tiny_sets
    s = train.subset(np.arange(0, len(train), 7))
    save_set(s, tmp_path / "a.pmds")
    back = load_set(tmp_path / "a.pmds")
    assert back.kind == s.kind and back.meta == json.loads(json.dumps(s.meta))
    for f in ("planes", "masks", "class_ids", "quats", "origins", "sources"):
        assert np.array_equal(getattr(back, f), getattr(s, f)), f
    raw = (tmp_path / "a.pmds").read_bytes()
    for cut in (len(raw) - 5, len(raw) // 2, 12):
        (tmp_path / "cut.pmds").write_bytes(raw[:cut])
        with pytest.raises(SetFormatError):
            load_set(tmp_path / "cut.pmds")
    (tmp_path / "bad.pmds").write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(SetFormatError):
        load_set(tmp_path / "bad.pmds")
    export_manifest(s, tmp_path / "m.json")
    man = json.loads((tmp_path / "m.json").read_text())
    assert man["count"] == len(s) == len(man["samples"])


def test_build_is_deterministic(tiny_cfg, tiny_sets):
    from tripose.dataset import _real_pool_cached
    _real_pool_cached.cache_clear()
    train, templates, test = tiny_sets
    again = build_training_set(tiny_cfg)
    assert np.array_equal(again.planes, train.planes)
    assert np.array_equal(build_template_set(tiny_cfg).planes, templates.planes)


def test_config_validation():
    with pytest.raises(DatasetError):
        DatasetConfig.from_dict({"colour": 1})
    with pytest.raises(DatasetError):
        DatasetConfig(coarse_level=2, fine_level=2)
    with pytest.raises(DatasetError):
        DatasetConfig(modality="IR")
    cfg = tiny_config()
    assert DatasetConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_role_check():
    s = SampleSet.empty("template", 8)
    s.origins = np.ones(1, np.uint8)
    with pytest.raises(DatasetError):
        s.check_role()
