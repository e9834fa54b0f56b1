"""Small fixtures shared by the unit tests: a 16x16 corpus and briefly trained detectors."""

import numpy as np
import pytest

from evasionbench.datagen import CorpusConfig, build_corpus
from evasionbench.zoo import KINDS, DetectorSpec, default_train_config, init_detector, train

SMALL_SIDE = 16


@pytest.fixture(scope="session")
def small_cfg():
    return CorpusConfig(
        n_real=64,
        n_fake_per_generator=16,
        n_test_real=16,
        n_test_fake_per_generator=4,
        side=SMALL_SIDE,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_corpus(small_cfg, tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    return build_corpus(small_cfg, root)


@pytest.fixture(scope="session")
def small_detectors(small_corpus):
    """One detector per architecture, a few epochs on the small corpus."""
    tr = small_corpus["train"]
    images = tr.load_images(SMALL_SIDE)
    out = {}
    for kind in KINDS:
        det = init_detector(DetectorSpec(kind, input_side=SMALL_SIDE), seed=1)
        out[kind] = train(det, tr, default_train_config(kind, epochs=3), images=images)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> one-line verdict, printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
