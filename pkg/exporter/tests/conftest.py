"""Fixtures for the exporter tests. Thread caps must precede the first
numpy/torch import so timing-sensitive suites in the same session stay
single-threaded."""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import pytest  # noqa: E402
import torch  # noqa: E402

from toy_models import ToyGenerator, TwoLayerGenerator  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_model():
    model = ToyGenerator()
    model.eval()
    return model


@pytest.fixture(scope="session")
def two_layer_model():
    model = TwoLayerGenerator()
    model.eval()
    return model
