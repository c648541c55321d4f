"""Shared fixtures.

The BLAS thread caps below must be set before numpy is first imported so the
single-threaded performance measurements mean what they claim; keep them at
the very top of this file. Independent oracles live in oracles.py.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import pytest  # noqa: E402

from halluscope import perturb, tensorstore  # noqa: E402


@pytest.fixture(scope="session")
def planted_fixture(tmp_path_factory):
    """Default planted fixture: calib + test manifest paths and loaded sets."""
    root = tmp_path_factory.mktemp("planted")
    spec = perturb.SyntheticSpec(n_calib=600, n_test=200, channels=16, seed=0)
    calib_path, test_path = perturb.gen_synthetic(spec, root)
    return {
        "calib_path": calib_path,
        "test_path": test_path,
        "calib": tensorstore.load_manifest(calib_path),
        "test": tensorstore.load_manifest(test_path),
    }
