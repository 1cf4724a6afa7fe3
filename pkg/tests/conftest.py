import numpy as np
import pytest

from cretta import kernels
from cretta.model import pretrain_source
from cretta.stream import make_dataset


@pytest.fixture(scope="session", autouse=True)
def _compiled_kernels():
    # Pay the JIT cost once up front so per-test timings stay meaningful.
    kernels.warm_up()


@pytest.fixture(scope="session")
def world():
    """Small pretrained 2-class setup shared by the unit tests: a labeled
    source dataset, a shifted-free target pool, and the frozen source model."""
    source = make_dataset("blobs", n=800, d=4, C=2, class_separation=5.0,
                          seed=11)
    target = make_dataset("blobs", n=800, d=4, C=2, class_separation=5.0,
                          seed=12)
    model = pretrain_source(source, seed=7, epochs=6, batch_size=100)
    return {"source": source, "target": target, "model": model}


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
