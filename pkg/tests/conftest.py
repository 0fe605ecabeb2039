import numpy as np
import pytest

from forcepipe.dataset import Condition, RawTrial
from forcepipe.synthgen import generate_dataset


def make_raw_trial(seconds=1.0, seed=0, condition=Condition.ISOTONIC, rest=()):
    """Random but well-formed trial at native rates."""
    rng = np.random.default_rng(seed)
    return RawTrial(
        subject_id="S01",
        condition=condition,
        level=5.0,
        emg_monopolar=rng.normal(size=(int(seconds * 2048), 32)),
        imu=rng.normal(size=(int(seconds * 500), 9)),
        biodex=rng.normal(size=(int(seconds * 1250), 3)),
        lever_arm_m=0.4,
        rest_intervals=tuple(rest),
    )


@pytest.fixture
def raw_trial():
    return make_raw_trial()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two subjects, three short isotonic trials each."""
    out = tmp_path_factory.mktemp("tiny")
    manifest = generate_dataset(out, n_subjects=2, trials_per_condition=3, seed=3,
                                conditions=("isotonic",), repetitions=1)
    return manifest
