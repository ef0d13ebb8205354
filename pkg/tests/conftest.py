import os
import sys

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

import oasis  # noqa: F401  (enables the fast allocator)
from oasis import pretrain as P
from oasis import world as W

MINI = W.WorldConfig(height=24, width=32, n_train=240, n_source_memory=16,
                     n_source_eval=8, val_episodes=2, deploy_episodes=2,
                     subsequences=2, frames_per_subsequence=12)


@pytest.fixture(scope="session")
def mini_benchmark():
    return W.make_benchmark(MINI, seed=404)


@pytest.fixture(scope="session")
def mini_model(mini_benchmark):
    """A small model with real source skill, shared by strategy tests."""
    cfg = P.PretrainConfig(epochs=3)
    model, losses = P.pretrain_variant("erm-mini", mini_benchmark.train_set, cfg, seed=404, classes=8)
    assert losses[-1] < losses[0]
    return model


@pytest.fixture(scope="session")
def mini_dr_model(mini_benchmark):
    cfg = P.PretrainConfig(epochs=3, dr_level=3)
    model, _ = P.pretrain_variant("dr3-mini", mini_benchmark.train_set, cfg, seed=404, classes=8)
    return model
