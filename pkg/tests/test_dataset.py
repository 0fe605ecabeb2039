import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from forcepipe import dsp
from forcepipe.dataset import (
    EMG_LABELS,
    Condition,
    DatasetManifest,
    ProcessedTrial,
    TrialDescriptor,
    apply_rest_mask,
    load_trial,
    rest_mask,
    torque_to_force,
    write_trial,
)
from forcepipe.errors import (
    IntervalOutOfRange,
    MalformedFile,
    NonFiniteSample,
    NonPositiveLeverArm,
    RateMismatch,
    UnsupportedCombination,
)
from forcepipe.preprocess import (
    condition_trial,
    preprocess_trial,
    read_store,
    segment_trial,
    write_store,
)

from conftest import make_raw_trial


def _descriptor(path, **kw):
    d = dict(path=str(path), subject_id="S01", condition=Condition.ISOTONIC, level=5.0, lever_arm_m=0.4)
    d.update(kw)
    return TrialDescriptor(**d)


@pytest.fixture
def trial_dir(tmp_path, raw_trial):
    return write_trial(raw_trial, tmp_path / "t1")


class TestLoadTrial:
    def test_valid_trial_has_44_streams(self, trial_dir):
        trial = load_trial(trial_dir, _descriptor(trial_dir))
        streams = trial.streams()
        assert len(streams) == 32 + 9 + 3
        assert {s.fs for s in streams} == {2048.0, 500.0, 1250.0}

    def test_round_trip_bit_identical(self, trial_dir, raw_trial):
        back = load_trial(trial_dir, _descriptor(trial_dir))
        for a, b in ((back.emg_monopolar, raw_trial.emg_monopolar), (back.imu, raw_trial.imu),
                     (back.biodex, raw_trial.biodex)):
            assert a.tobytes() == b.tobytes()

    def test_serialize_twice_identical_files(self, tmp_path, trial_dir, raw_trial):
        again = write_trial(load_trial(trial_dir, _descriptor(trial_dir)), tmp_path / "t2")
        for name in ("emg.csv", "imu.csv", "biodex.csv"):
            assert (trial_dir / name).read_bytes() == (again / name).read_bytes()

    def test_31_emg_columns(self, trial_dir):
        df = pd.read_csv(trial_dir / "emg.csv")
        df.drop(columns=[EMG_LABELS[-1]]).to_csv(trial_dir / "emg.csv", index=False)
        with pytest.raises(MalformedFile):
            load_trial(trial_dir, _descriptor(trial_dir))

    def test_wrong_header(self, trial_dir):
        text = (trial_dir / "imu.csv").read_text().replace("acc_x", "accel_x", 1)
        (trial_dir / "imu.csv").write_text(text)
        with pytest.raises(MalformedFile):
            load_trial(trial_dir, _descriptor(trial_dir))

    @pytest.mark.parametrize("token", ["NaN", "nan", "inf", "-Infinity"])
    def test_non_finite_token(self, trial_dir, token):
        lines = (trial_dir / "biodex.csv").read_text().splitlines()
        cells = lines[5].split(",")
        cells[1] = token
        lines[5] = ",".join(cells)
        (trial_dir / "biodex.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(NonFiniteSample):
            load_trial(trial_dir, _descriptor(trial_dir))

    def test_garbage_token(self, trial_dir):
        lines = (trial_dir / "imu.csv").read_text().splitlines()
        lines[3] = "abc," + lines[3].split(",", 1)[1]
        (trial_dir / "imu.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(MalformedFile):
            load_trial(trial_dir, _descriptor(trial_dir))

    def test_rate_mismatch(self, trial_dir):
        with pytest.raises(RateMismatch):
            load_trial(trial_dir, _descriptor(trial_dir, imu_fs=250.0))

    def test_interval_outside_recording(self, trial_dir):
        with pytest.raises(IntervalOutOfRange):
            load_trial(trial_dir, _descriptor(trial_dir, rest_intervals=((0.5, 3.0),)))


class TestManifest:
    def test_round_trip(self, tmp_path, trial_dir):
        m = DatasetManifest([_descriptor("t1", rest_intervals=((0.0, 0.1),))], root=tmp_path)
        path = m.save(tmp_path / "manifest.json")
        back = DatasetManifest.load(path)
        assert back.trials == m.trials
        assert back.resolve(back.trials[0]) == trial_dir

    def test_fields(self, tmp_path):
        DatasetManifest([_descriptor("t1")]).save(tmp_path / "m.json")
        entry = json.loads((tmp_path / "m.json").read_text())["trials"][0]
        assert entry["emg_fs"] == 2048 and entry["imu_fs"] == 500 and entry["biodex_fs"] == 1250
        assert entry["condition"] == "isotonic"

    def test_bad_version(self, tmp_path):
        (tmp_path / "m.json").write_text('{"format_version": 9, "trials": []}')
        with pytest.raises(MalformedFile):
            DatasetManifest.load(tmp_path / "m.json")

    def test_select(self):
        m = DatasetManifest([_descriptor("a"), _descriptor("b", subject_id="S02", condition=Condition.DYNAMIC)])
        assert [t.path for t in m.select("dynamic")] == ["b"]
        assert [t.path for t in m.select(subjects=["S01"])] == ["a"]
        assert m.subjects() == ["S01", "S02"]

    def test_unknown_condition(self):
        with pytest.raises(UnsupportedCombination):
            Condition.parse("isometric")


class TestTorqueToForce:
    def test_examples(self):
        assert torque_to_force(0.0, 0.3) == 0.0
        assert torque_to_force(5.0, 0.25) == 20.0
        assert abs(torque_to_force(5.0, 0.399) - 12.53) <= 0.01

    def test_sign_preserved(self):
        np.testing.assert_array_equal(torque_to_force(np.array([-8.0, 8.0]), 0.4), [-20.0, 20.0])

    @pytest.mark.parametrize("r", [0.0, -0.1])
    def test_non_positive_lever(self, r):
        with pytest.raises(NonPositiveLeverArm):
            torque_to_force(1.0, r)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(-1e3, 1e3), tau=st.floats(-50, 50), r=st.floats(0.05, 1.0))
    def test_linear_in_torque(self, a, tau, r):
        np.testing.assert_allclose(torque_to_force(a * tau, r), a * torque_to_force(tau, r), rtol=1e-12, atol=1e-9)


def _processed(n):
    rng = np.random.default_rng(n)
    return ProcessedTrial(rng.normal(size=(n, 28)), rng.normal(size=(n, 9)), rng.normal(size=n))


class TestRestMask:
    def test_empty_is_identity(self):
        t = _processed(100)
        assert apply_rest_mask(t, []) is t

    def test_full_interval(self):
        t = _processed(100)
        out = apply_rest_mask(t, [(0.0, 100 / 2048)])
        assert len(out.emg_diff) == len(out.imu) == len(out.force_n) == 0

    def test_quarter_second_enumeration(self):
        # count samples t = i/2048 with 0 <= t < 0.25 directly
        dropped = sum(1 for i in range(1000) if 0.0 <= i / 2048 < 0.25)
        out = apply_rest_mask(_processed(1000), [(0.0, 0.25)])
        assert len(out) == 1000 - dropped == 488

    def test_alignment_preserved(self):
        t = _processed(300)
        out = apply_rest_mask(t, [(0.01, 0.02), (0.05, 0.06)])
        keep = rest_mask(np.arange(300) / 2048, [(0.01, 0.02), (0.05, 0.06)])
        np.testing.assert_array_equal(out.emg_diff, t.emg_diff[keep])
        np.testing.assert_array_equal(out.imu, t.imu[keep])
        np.testing.assert_array_equal(out.force_n, t.force_n[keep])
        np.testing.assert_array_equal(out.sample_index, np.flatnonzero(keep))

    def test_half_open_adjacent(self):
        times = np.array([0.0, 0.1, 0.2, 0.3])
        keep = rest_mask(times, [(0.0, 0.1), (0.1, 0.2)], duration=0.4)
        np.testing.assert_array_equal(keep, [False, False, True, True])

    @pytest.mark.parametrize("iv", [[(0.2, 0.1)], [(0.0, 0.2), (0.1, 0.3)], [(0.0, 9.0)]])
    def test_invalid_intervals(self, iv):
        with pytest.raises(IntervalOutOfRange):
            apply_rest_mask(_processed(1000), iv)


class TestPreprocess:
    def test_lengths_agree(self, raw_trial):
        p = condition_trial(raw_trial)
        assert len(p.emg_diff) == len(p.imu) == len(p.force_n)
        assert p.emg_diff.shape[1] == 28 and p.imu.shape[1] == 9

    def test_force_is_smoothed_torque_over_lever(self, raw_trial):
        p = condition_trial(raw_trial)
        torque = dsp.resample_linear(raw_trial.biodex, 1250, 2048)[: len(p), 0]
        np.testing.assert_allclose(p.force_n, dsp.moving_average(torque, 300) / 0.4, rtol=1e-12)

    def test_rest_removed(self):
        raw = make_raw_trial(seconds=2.0, rest=[(0.0, 0.5)])
        p = preprocess_trial(raw)
        assert p.sample_index[0] == 1024
        assert len(p) == len(condition_trial(raw)) - 1024

    @pytest.mark.parametrize("ms,w", [(50, 102), (100, 204), (150, 307)])
    def test_segment_shapes(self, raw_trial, ms, w):
        seg = segment_trial(preprocess_trial(raw_trial), dsp.SegmentSpec(ms), "t")
        n = len(seg)
        assert seg.emg_time.shape == (n, w, 28)
        assert seg.emg_freq.shape == (n, w // 2, 28)
        assert seg.imu.shape == (n, w, 9)
        assert seg.force.shape == seg.time_s.shape == (n,)

    def test_store_round_trip(self, tmp_path, raw_trial):
        seg = segment_trial(preprocess_trial(raw_trial), dsp.SegmentSpec(50), "S01/trial_a")
        write_store([seg], tmp_path / "store", skipped=["S01/short"])
        meta = json.loads((tmp_path / "store" / "store.json").read_text())
        assert meta["skipped"] == ["S01/short"]
        (back,) = read_store(tmp_path / "store")
        for name in ("emg_time", "emg_freq", "imu", "force", "time_s"):
            np.testing.assert_array_equal(getattr(back, name), getattr(seg, name))
        assert back.trial_id == "S01/trial_a"
        assert read_store(tmp_path / "store", condition="dynamic") == []
