"""Shared fixtures: a small natural-image corpus written as netpbm files."""
import numpy as np
import pytest

from qmattack.image import load_dataset, quantize, rgb_to_luma, save_pgm

CROP = (288, 352)  # rows, cols
CORPUS = ("astronaut", "camera", "chelsea", "coffee", "rocket")


def _luma_crop(name, shape=CROP):
    from skimage import data

    img = np.asarray(getattr(data, name)(), dtype=np.float64)
    if img.ndim == 3:
        img = rgb_to_luma(img[..., 0], img[..., 1], img[..., 2])
    h, w = shape
    r, c = (img.shape[0] - h) // 2, (img.shape[1] - w) // 2
    return quantize(img[r:r + h, c:c + w]).astype(np.float64)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    for name in CORPUS:
        save_pgm(d / f"{name}.pgm", _luma_crop(name))
    return d


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return load_dataset(corpus_dir)


@pytest.fixture(scope="session")
def camera(corpus):
    return dict(corpus.entries)["camera"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
