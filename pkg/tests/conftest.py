import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sspslab.config import ExperimentConfig, build_dataset
from sspslab.synthdata import GenConfig


@pytest.fixture(scope="session")
def default_dataset():
    """The default synthetic dataset plus its trial list."""
    exp = ExperimentConfig()
    records, trials = build_dataset(exp)
    return exp, records, trials


@pytest.fixture(scope="session")
def small_dataset():
    """A tiny hierarchy for fast trainer-level tests."""
    exp = ExperimentConfig(
        data=GenConfig(n_speakers=8, recs_per_speaker=2, utts_per_recording=4,
                       dim_input=8, seed=77),
        n_target_trials=40,
        n_nontarget_trials=40,
    )
    records, trials = build_dataset(exp)
    return exp, records, trials


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
