import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from oracles import stdlib_corpus  # noqa: E402


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    """About 1 MB of text built from the interpreter's stdlib sources."""
    return stdlib_corpus(tmp_path_factory.mktemp("corpus") / "corpus.txt", 1_000_000)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    return stdlib_corpus(tmp_path_factory.mktemp("small") / "small.txt", 60_000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
