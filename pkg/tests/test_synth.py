import json

import numpy as np
import pytest
import scipy.signal as sps

from ecogscreen.dataset import HAND, TONGUE, Condition, load_participant
from ecogscreen.knn import evaluate_variant
from ecogscreen.nn import TrainConfig, build_cnn, evaluate, train
from ecogscreen.pipeline import dl_condition_split, participant_splits
from ecogscreen.synth import (SynthConfig, burst_amplitude, channel_subsets, colored_noise, generate_cohort,
                              generate_recording, write_cohort)

DELTAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def loglog_slope(x, lo=2.0, hi=200.0, fs=1000.0):
    f, p = sps.welch(x, fs, nperseg=2048, axis=0)
    keep = (f >= lo) & (f <= hi)
    p = p[keep].mean(axis=1) if p.ndim == 2 else p[keep]
    return np.polyfit(np.log10(f[keep]), np.log10(p), 1)[0]


def knn_test(delta, seed):
    real, imag = generate_cohort(SynthConfig(deltas=(delta,), seed=seed))[0]
    split = participant_splits(real, imag, seed, variants=("processed",))["processed"]
    return evaluate_variant(split, seed=seed)[1]


# -- configuration and structure -------------------------------------------------

@pytest.mark.parametrize("kw", [{"deltas": (1.2,)}, {"deltas": ()}, {"channels": 3},
                                {"events_per_condition": 19}, {"min_gap": 2999},
                                {"gamma_band": (70, 600)}, {"active_channels": 9}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_participant_ids():
    assert SynthConfig(deltas=(0, 1, 0.5)).participant_ids() == ["s01", "s02", "s03"]


def test_seed_determinism():
    cfg = SynthConfig(deltas=(0.3, 0.9), events_per_condition=20, channels=6, active_channels=2, seed=4)
    a, b = generate_cohort(cfg), generate_cohort(cfg)
    for (ra, ia), (rb, ib) in zip(a, b):
        assert ra.voltages.tobytes() == rb.voltages.tobytes()
        assert ia.voltages.tobytes() == ib.voltages.tobytes()
        assert ra.events == rb.events
    other = generate_cohort(SynthConfig(deltas=(0.3, 0.9), events_per_condition=20, channels=6,
                                        active_channels=2, seed=5))
    assert other[0][0].voltages.tobytes() != a[0][0].voltages.tobytes()


def test_event_layout(small_cohort):
    cfg, cohort = small_cohort
    for real, imag in cohort:
        for rec in (real, imag):
            ev = rec.events
            assert len(ev) == cfg.events_per_condition
            assert [e.stim_id for e in ev[:4]] == [TONGUE, HAND, TONGUE, HAND]
            assert ev[0].t_on >= 3000
            assert all(b.t_on - a.t_off >= 3000 for a, b in zip(ev, ev[1:]))
            assert rec.voltages.shape[0] - ev[-1].t_off >= 3000


def test_complementary_amplitudes():
    for d in DELTAS:
        r, i = burst_amplitude(d, Condition.REAL, 1.0), burst_amplitude(d, Condition.IMAGERY, 1.0)
        assert r + i == pytest.approx(1.0)
        assert r - i == pytest.approx(d)
    assert burst_amplitude(0.0, Condition.REAL, 2.0) == burst_amplitude(0.0, Condition.IMAGERY, 2.0)


def test_bursts_confined_to_subsets():
    cfg = SynthConfig(deltas=(1.0,), events_per_condition=20, channels=8, active_channels=2, seed=1)
    rec = generate_recording(cfg, 0, Condition.REAL)
    sub = channel_subsets(cfg)
    ev = rec.events[0]
    x = rec.voltages[ev.t_on:ev.t_off]
    f, p = sps.welch(x, 1000.0, nperseg=512, axis=0)
    gamma = p[(f >= 75) & (f <= 105)].mean(axis=0)
    assert gamma[sub[TONGUE]].min() > 5 * gamma[sub[HAND]].max()
    assert gamma[sub[TONGUE]].min() > 5 * gamma[2 * cfg.active_channels:].max()


@pytest.mark.parametrize("exponent", [0.5, 1.0, 1.5])
def test_noise_spectral_slope(exponent):
    x = colored_noise(np.random.default_rng(0), 200_000, 4, exponent)
    assert loglog_slope(x) == pytest.approx(-exponent, abs=0.2)
    assert x.var() == pytest.approx(1.0, rel=0.25)


def test_recording_baseline_slope():
    cfg = SynthConfig(deltas=(0.5,), events_per_condition=20, channels=6, active_channels=2, seed=2)
    rec = generate_recording(cfg, 0, Condition.IMAGERY)
    # bursts live above 70 Hz, so the low band reflects the background alone
    assert loglog_slope(rec.voltages[:, 2 * cfg.active_channels:], hi=60.0) == pytest.approx(-1.0, abs=0.2)


def test_container_roundtrip(tmp_path, small_cohort):
    cfg, cohort = small_cohort
    data = write_cohort(cfg, tmp_path, cohort)
    manifest = json.loads((data / "cohort.json").read_text())
    assert manifest["participants"] == cfg.participant_ids()
    assert "delta" not in (data / "cohort.json").read_text()
    truth = json.loads((tmp_path / "ground_truth.json").read_text())
    assert truth["deltas"] == dict(zip(cfg.participant_ids(), cfg.deltas))
    for pid, (real, imag) in zip(cfg.participant_ids(), cohort):
        back = load_participant(data, pid)
        for cond, rec in ((Condition.REAL, real), (Condition.IMAGERY, imag)):
            got = back[cond]
            assert got.voltages.tobytes() == rec.voltages.tobytes()
            assert got.events == rec.events and got.srate == rec.srate
            assert got.participant_id == pid and got.condition is cond


# -- pipeline-level ground truth -------------------------------------------------

@pytest.fixture(scope="module")
def knn_grid():
    """KNN test score per (delta, seed) at the default generator settings."""
    return {d: [knn_test(d, s) for s in range(10)] for d in DELTAS}


@pytest.mark.slow
def test_delta_zero_is_chance(knn_grid):
    scores = knn_grid[0.0] + [knn_test(0.0, s) for s in range(10, 20)]
    assert 0.35 <= np.mean(scores) <= 0.65


@pytest.mark.slow
def test_knn_monotone_in_delta(knn_grid):
    means = [np.mean(knn_grid[d]) for d in DELTAS]
    assert all(b >= a - 0.03 for a, b in zip(means, means[1:])), means


@pytest.mark.slow
def test_delta_one_separable(knn_grid):
    assert min(knn_grid[1.0]) >= 0.95
    for seed in range(3):
        real, imag = generate_cohort(SynthConfig(deltas=(1.0,), seed=seed))[0]
        split = dl_condition_split(real, imag, seed)
        model = build_cnn(split.train.data.shape[1:] + (1,), 2, seed=seed)
        train(model, split, TrainConfig(seed=seed))
        assert evaluate(model, split.test)[1] >= 0.95
