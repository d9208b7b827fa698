import numpy as np
import pytest
import torch

from mrisynth.data import generate_phantom_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def phantom_root(tmp_path_factory):
    """Small shared 4-modality phantom dataset (session-scoped, read-only)."""
    root = tmp_path_factory.mktemp("phantom4")
    generate_phantom_dataset(
        root, n_subjects=4, seed=1234, size=32, depth=10, n_modalities=4, lesion_prob=1.0
    )
    return root


@pytest.fixture(scope="session")
def phantom_root3(tmp_path_factory):
    """Three-modality variant for N=3 code paths."""
    root = tmp_path_factory.mktemp("phantom3")
    generate_phantom_dataset(
        root, n_subjects=3, seed=77, size=32, depth=8, n_modalities=3, lesion_prob=0.5
    )
    return root


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))
