import sys

import numpy as np
import pytest

from ttclab.model import Architecture, DualEncoder


def linear_model(n_pixels=8, n_classes=3, embed_dim=None, seed=0, shape=None):
    """Single dense layer, no offset: scores are cosine of a linear map."""
    shape = shape or (1, 1, n_pixels)
    embed_dim = embed_dim or n_classes
    arch = Architecture(*shape, 0, embed_dim, n_classes)
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(arch.n_pixels, embed_dim))
    b = rng.normal(size=embed_dim)
    emb = rng.normal(size=(n_classes, embed_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return DualEncoder(arch, [(w, b)], emb, logit_scale=10.0)


def identity_model(shape=(1, 2, 2), n_classes=2):
    arch = Architecture(*shape, 0, int(np.prod(shape)), n_classes)
    d = arch.n_pixels
    emb = np.eye(n_classes, d) + 1e-3
    return DualEncoder(arch, [(np.eye(d), np.zeros(d))], emb)


@pytest.fixture
def small():
    return DualEncoder.init(Architecture(3, 8, 8, 16, 8, 4), seed=3)


@pytest.fixture
def images8():
    rng = np.random.default_rng(11)
    return rng.uniform(0.1, 0.9, size=(6, 3, 8, 8)).astype(np.float32)


@pytest.fixture(scope="session")
def pinned():
    from ttclab.presets import pinned_model
    return pinned_model()


@pytest.fixture(scope="session")
def pinned_test():
    from ttclab.presets import pinned_test_set
    return pinned_test_set()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    verdicts = getattr(acceptance, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
