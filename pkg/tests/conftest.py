"""Session fixtures: synthetic corpora and cached texture maps.

The tiny corpus (60 patches) keeps unit tests fast; the acceptance
module builds its own full-size corpus lazily via the factories here.
"""

import numpy as np
import pytest

from ctl.data import entry_key, generate_corpus
from ctl.lbp import LbpConfig
from ctl.pretrain import load_texture_maps


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """5 classes x 2 patients x 2 frames x 3 windows = 60 patches."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    return generate_corpus(root, seed=11, patients_per_class=2,
                           frames_per_volume=2)


@pytest.fixture(scope="session")
def tiny_maps(tiny_corpus):
    """entry_key -> normalized default-geometry texture map."""
    maps = load_texture_maps(tiny_corpus, tiny_corpus.entries, LbpConfig())
    return {entry_key(e): m for e, m in zip(tiny_corpus.entries, maps)}
