"""Shared fixtures: tiny corpora, trained desk-scale models, backend lists."""
from __future__ import annotations

import numpy as np
import pytest

from mlstm_lab.data import corpus_from_bytes
from mlstm_lab.kernels import available_backends
from mlstm_lab.training import RunConfig, train


def pytest_addoption(parser):
    parser.addoption("--skip-desk", action="store_true", default=False,
                     help="skip the desk-scale (tens of minutes) trainings")


@pytest.fixture(scope="session")
def backends():
    return available_backends()


@pytest.fixture(scope="session")
def tiny_text():
    """~12 KB of word-shaped text with newlines, 27-ish symbol vocabulary."""
    rng = np.random.default_rng(1234)
    words = [b"the", b"fox", b"jumps", b"over", b"a", b"lazy", b"dog", b"quick",
             b"brown", b"stream", b"of", b"bytes", b"model", b"memory"]
    parts = []
    size = 0
    while size < 12_000:
        line = b" ".join(words[i] for i in rng.integers(0, len(words), 12)) + b"\n"
        parts.append(line)
        size += len(line)
    return b"".join(parts)[:12_000]


@pytest.fixture(scope="session")
def tiny_corpus(tiny_text):
    return corpus_from_bytes(tiny_text, source="<tiny>")


@pytest.fixture(scope="session")
def periodic_corpus():
    return corpus_from_bytes(b"abcd" * 256, source="<periodic>")


MEMORIZE_CONFIG = RunConfig(
    arch="mlstm", hidden=32, optimizer="adam", lr_start=1e-3, lr_min=1e-3,
    batch_lanes=4, window=32, epochs=300, eval_interval=4 * 32 * 100,
    patience=1000, seed=1)


@pytest.fixture(scope="session")
def memorize_run(periodic_corpus):
    """(best checkpoint, log, wall seconds) of the 1 KB memorization run."""
    import time
    t0 = time.perf_counter()
    best, log = train(MEMORIZE_CONFIG, periodic_corpus)
    return best, log, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_models(request):
    """Cached criterion-8 artifacts: two trained models plus their losses."""
    if request.config.getoption("--skip-desk"):
        pytest.skip("desk-scale artifacts skipped by --skip-desk")
    from .acceptance_artifacts import load_artifacts
    corpus_path, artifacts = load_artifacts()
    return corpus_path, artifacts
