import numpy as np
import pytest

from tripose.dataset import DatasetConfig, build_all

TINY_OBJECTS = (("box", 0.15, 1), ("cone", 0.15, 2))


def tiny_config(**kw) -> DatasetConfig:
    base = dict(objects=TINY_OBJECTS, coarse_level=0, fine_level=1, patch_size=24,
                real_per_object=20, background_images=4, modality="RGB-D")
    base.update(kw)
    return DatasetConfig(**base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_sets(tiny_cfg):
    return build_all(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def record_criterion(n, ok, detail):
    _CRITERIA[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
