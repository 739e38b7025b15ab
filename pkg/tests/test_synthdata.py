import numpy as np
import pytest

from sspslab.core import make_rng
from sspslab.synthdata import (
    GenConfig,
    TrialPair,
    ViewKind,
    base_features,
    generate_dataset,
    load_dataset,
    load_trials,
    make_trials,
    make_view,
    recording_labels,
    save_dataset,
    save_trials,
    speaker_labels,
)


def test_counting():
    cfg = GenConfig(n_speakers=4, recs_per_speaker=2, utts_per_recording=3, dim_input=5)
    records = generate_dataset(cfg)
    assert len(records) == 24
    assert len({r.recording_id for r in records}) == 8
    assert [r.index for r in records] == list(range(24))
    # recording id determines speaker id
    rec_to_spk = {}
    for r in records:
        assert rec_to_spk.setdefault(r.recording_id, r.speaker_id) == r.speaker_id


def test_zero_sigma_collapse():
    cfg = GenConfig(n_speakers=3, recs_per_speaker=2, utts_per_recording=4,
                    dim_input=6, sigma_recording=0.0, sigma_utterance=0.0)
    records = generate_dataset(cfg)
    for spk in range(3):
        rows = [r.base for r in records if r.speaker_id == spk]
        for row in rows[1:]:
            assert np.array_equal(row, rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(1.0)


def test_regeneration_bitwise_identical():
    cfg = GenConfig()
    a = generate_dataset(cfg)
    b = generate_dataset(cfg)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.base, rb.base)


def _pair_means(records):
    feats = base_features(records)
    unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    sims = unit @ unit.T
    spk = speaker_labels(records)
    rec = recording_labels(records)
    iu, ju = np.triu_indices(len(records), k=1)
    s = sims[iu, ju]
    same_rec = rec[iu] == rec[ju]
    same_spk = spk[iu] == spk[ju]
    groups = {
        "same_recording": s[same_rec],
        "same_speaker_cross_recording": s[same_spk & ~same_rec],
        "cross_speaker": s[~same_spk],
    }
    return groups


def test_similarity_tier_ordering_with_margins():
    groups = _pair_means(generate_dataset(GenConfig()))
    stats = {
        name: (vals.mean(), vals.std(ddof=1) / np.sqrt(vals.size))
        for name, vals in groups.items()
    }
    m_rec, se_rec = stats["same_recording"]
    m_spk, se_spk = stats["same_speaker_cross_recording"]
    m_x, se_x = stats["cross_speaker"]
    assert m_rec - m_spk > 3.0 * np.hypot(se_rec, se_spk)
    assert m_spk - m_x > 3.0 * np.hypot(se_spk, se_x)


def test_make_view_kinds(rng):
    records = generate_dataset(GenConfig(n_speakers=2, recs_per_speaker=2, utts_per_recording=2))
    rec = records[0]
    ref = make_view(rec, ViewKind.REFERENCE, 0.5, rng)
    assert np.array_equal(ref.features, rec.base)
    clean = make_view(rec, ViewKind.ANCHOR, 0.0, rng)
    assert np.array_equal(clean.features, rec.base)
    v1 = make_view(rec, ViewKind.POSITIVE, 0.5, rng)
    v2 = make_view(rec, ViewKind.POSITIVE, 0.5, rng)
    assert not np.array_equal(v1.features, v2.features)
    # global views carry half the noise scale in expectation
    g = [make_view(rec, ViewKind.GLOBAL, 0.5, rng).features - rec.base for _ in range(200)]
    l = [make_view(rec, ViewKind.LOCAL, 0.5, rng).features - rec.base for _ in range(200)]
    assert np.std(g) < np.std(l)


def test_trials_counts_and_labels(rng):
    records = generate_dataset(GenConfig(n_speakers=6, recs_per_speaker=3, utts_per_recording=4))
    trials = make_trials(records, 100, 100, rng)
    assert len(trials) == 200
    assert sum(t.is_target for t in trials) == 100
    by_index = {r.index: r for r in records}
    seen = set()
    for t in trials:
        a, b = by_index[t.enroll_index], by_index[t.test_index]
        key = tuple(sorted((t.enroll_index, t.test_index)))
        assert key not in seen
        seen.add(key)
        if t.is_target:
            assert a.speaker_id == b.speaker_id
            assert a.recording_id != b.recording_id
        else:
            assert a.speaker_id != b.speaker_id


def test_trials_single_recording_per_speaker_fails(rng):
    records = generate_dataset(GenConfig(n_speakers=4, recs_per_speaker=1, utts_per_recording=4))
    with pytest.raises(ValueError):
        make_trials(records, 10, 10, rng)


def test_trial_pair_rejects_self_comparison():
    with pytest.raises(ValueError):
        TrialPair(enroll_index=3, test_index=3, is_target=True)


def test_dataset_roundtrip(tmp_path):
    records = generate_dataset(GenConfig(n_speakers=3, recs_per_speaker=2, utts_per_recording=2))
    path = tmp_path / "dataset.txt"
    save_dataset(records, path)
    loaded = load_dataset(path)
    assert len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert (a.index, a.speaker_id, a.recording_id) == (b.index, b.speaker_id, b.recording_id)
        assert np.array_equal(a.base, b.base)  # 17 significant digits round-trip


def test_trials_roundtrip(tmp_path):
    records = generate_dataset(GenConfig(n_speakers=4, recs_per_speaker=2, utts_per_recording=2))
    trials = make_trials(records, 5, 5, make_rng(3, 0))
    path = tmp_path / "trials.txt"
    save_trials(trials, path)
    assert load_trials(path) == trials
