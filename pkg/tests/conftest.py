import numpy as np
import pytest

from tamperkit import tensor as T
from tamperkit.datagen import generate_dataset, load_manifest


@pytest.fixture(autouse=True)
def _clean_tape():
    # a backward() that raised before running leaves nodes behind
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 authentic + 12 tampered 64px images, shared across tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(root, seed=7, n_per_class=12, size=64, kinds=("copy_move", "splice"))
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    return load_manifest(tiny_dataset / "manifest.jsonl")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
