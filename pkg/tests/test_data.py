import json

import numpy as np
import pytest
from scipy import stats

from hearvar.data import (
    Dataset,
    DatasetManifest,
    FormatError,
    GeneratorConfig,
    InsufficientFrames,
    InvalidConfig,
    NoQuietSegment,
    NoiseLevel,
    NOISY_LEVELS,
    Segment,
    SessionRecord,
    SubjectRecord,
    datasets_equal,
    generate_synthetic,
    load_dataset,
    sample_triplets,
    save_dataset,
    segment_stream,
    select_anchor,
)


def small_config(**overrides):
    cfg = dict(n_subjects=8, seed=1, feature_dim=4, entries_per_session=8)
    cfg.update(overrides)
    return GeneratorConfig(**cfg)


def make_segment(order, level, subject="s0", session="c0", frames=None, dim=2):
    if frames is None:
        frames = np.zeros((130, dim))
    return Segment(session, subject, order, level, frames)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def test_every_subject_in_exactly_one_session():
    data = generate_synthetic(GeneratorConfig(n_subjects=30, seed=3, feature_dim=4))
    assert len(data.sessions) == 15
    seen = []
    for sess in data.sessions.values():
        assert len(sess.subject_ids) == 2
        seen.extend(sess.subject_ids)
    assert sorted(seen) == data.subject_ids()


def test_generator_is_deterministic():
    cfg = small_config()
    assert datasets_equal(generate_synthetic(cfg), generate_synthetic(small_config()))
    different = generate_synthetic(small_config(seed=2))
    assert not datasets_equal(generate_synthetic(cfg), different)


def test_schedule_noise_levels_balanced():
    data = generate_synthetic(small_config(entries_per_session=10))
    for sess in data.sessions.values():
        counts = {level: 0 for level in NoiseLevel}
        for level, _ in sess.schedule:
            counts[level] += 1
        assert max(counts.values()) - min(counts.values()) <= 1
        # every entry is a real level change
        levels = [level for level, _ in sess.schedule]
        assert all(a is not b for a, b in zip(levels, levels[1:]))


def test_segment_counts_and_bounds():
    cfg = small_config()
    data = generate_synthetic(cfg)
    assert len(data.segments) == cfg.n_subjects * cfg.entries_per_session
    m = data.manifest
    for seg in data.segments:
        assert m.min_frames <= seg.frames.shape[0] <= m.max_frames
        assert seg.frames.shape[1] == cfg.feature_dim


def test_tercile_positive_rates_near_defaults():
    data = generate_synthetic(GeneratorConfig(n_subjects=200, seed=11, feature_dim=2,
                                              entries_per_session=4))
    by_group = {0: [], 1: [], 2: []}
    ranges = ((18, 39), (40, 56), (57, 88))
    for rec in data.subjects.values():
        for g, (lo, hi) in enumerate(ranges):
            if lo <= rec.age <= hi:
                by_group[g].append(rec.hearing_status)
    for g, target in enumerate((0.18, 0.52, 0.76)):
        rate = np.mean(by_group[g])
        assert abs(rate - target) < 0.1, (g, rate)


def _displacement_norms(data):
    """Per-subject mean quiet-vs-noisy displacement of pooled frame features."""
    norms = {0: [], 1: []}
    for subject_id, segs in data.segments_by_subject().items():
        quiet = [s.frames.mean(axis=0) for s in segs if s.noise_level.is_quiet]
        noisy = [s.frames.mean(axis=0) for s in segs if not s.noise_level.is_quiet]
        if not quiet or not noisy:
            continue
        mu_quiet = np.mean(quiet, axis=0)
        disp = np.mean([np.linalg.norm(f - mu_quiet) for f in noisy])
        norms[data.subjects[subject_id].hearing_status].append(disp)
    return norms


def test_hearing_signal_lives_in_displacement():
    data = generate_synthetic(GeneratorConfig(n_subjects=100, seed=5, age_leak_gain=0.0))
    norms = _displacement_norms(data)
    res = stats.ttest_ind(norms[1], norms[0], equal_var=False, alternative="greater")
    assert res.pvalue < 0.01


def test_no_hearing_gain_means_no_displacement_difference():
    rejections = 0
    for seed in range(50):
        data = generate_synthetic(GeneratorConfig(
            n_subjects=30, seed=seed, feature_dim=4, entries_per_session=8,
            hearing_variation_gain=0.0, age_leak_gain=0.0,
        ))
        norms = _displacement_norms(data)
        if len(norms[0]) < 2 or len(norms[1]) < 2:
            continue
        res = stats.ttest_ind(norms[1], norms[0], equal_var=False)
        if res.pvalue < 0.01:
            rejections += 1
    # binomial(50, 0.01): more than 3 rejections is astronomically unlikely
    assert rejections <= 3


def test_invalid_configs_rejected():
    with pytest.raises(InvalidConfig):
        generate_synthetic(GeneratorConfig(n_subjects=7))
    with pytest.raises(InvalidConfig):
        generate_synthetic(GeneratorConfig(frame_noise_std=-0.5))
    bad_response = dict.fromkeys(NoiseLevel, 0.5)
    with pytest.raises(InvalidConfig):
        generate_synthetic(GeneratorConfig(noise_response=bad_response))
    decreasing = {NoiseLevel.QUIET: 0.0, NoiseLevel.DB55: 1.0,
                  NoiseLevel.DB65: 0.5, NoiseLevel.DB75: 0.2}
    with pytest.raises(InvalidConfig):
        generate_synthetic(GeneratorConfig(noise_response=decreasing))


# ---------------------------------------------------------------------------
# segment_stream
# ---------------------------------------------------------------------------

def test_segment_stream_cuts_at_schedule_boundaries():
    schedule = [(NoiseLevel.QUIET, 30), (NoiseLevel.DB75, 30)]
    segments = segment_stream(np.arange(300 * 2).reshape(300, 2), schedule, fps=5)
    assert len(segments) == 2
    assert [s.frames.shape[0] for s in segments] == [150, 150]
    assert [s.order_index for s in segments] == [0, 1]
    assert segments[0].noise_level is NoiseLevel.QUIET
    assert segments[1].noise_level is NoiseLevel.DB75
    # boundary frames land in the right segment
    assert segments[0].frames[-1, 0] == 149 * 2
    assert segments[1].frames[0, 0] == 150 * 2


def test_segment_stream_single_entry():
    segments = segment_stream(np.zeros((150, 3)), [(NoiseLevel.DB55, 30)], fps=5)
    assert len(segments) == 1
    assert segments[0].frames.shape == (150, 3)


def test_segment_stream_insufficient_frames():
    schedule = [(NoiseLevel.QUIET, 30), (NoiseLevel.DB75, 30)]
    with pytest.raises(InsufficientFrames):
        segment_stream(np.zeros((299, 2)), schedule, fps=5)


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def test_round_trip_is_lossless(tmp_path):
    data = generate_synthetic(small_config())
    save_dataset(data, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert datasets_equal(data, loaded)


def test_load_rejects_wrong_feature_dim(tmp_path):
    data = generate_synthetic(small_config())
    save_dataset(data, tmp_path / "ds")
    seg_file = tmp_path / "ds" / "segments.jsonl"
    lines = seg_file.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["frames"] = [row[:-1] for row in rec["frames"]]
    lines[0] = json.dumps(rec)
    seg_file.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "ds")


def test_load_rejects_version_mismatch(tmp_path):
    data = generate_synthetic(small_config())
    save_dataset(data, tmp_path / "ds")
    mf = tmp_path / "ds" / "manifest.json"
    raw = json.loads(mf.read_text())
    raw["format_version"] = 99
    mf.write_text(json.dumps(raw))
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "ds")


def test_empty_dataset_round_trips(tmp_path):
    manifest = DatasetManifest(
        format_version=1, feature_dim=4, fps=5, min_frames=125, max_frames=175,
        age_min=18, age_max=88, n_subjects=0, n_sessions=0, n_segments=0,
    )
    empty = Dataset(manifest, {}, {}, [])
    save_dataset(empty, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded.manifest.n_segments == 0
    assert datasets_equal(empty, loaded)


def test_subset_by_sessions():
    data = generate_synthetic(small_config())
    keep = data.session_ids()[:2]
    sub = data.subset_by_sessions(keep)
    sub.validate()
    assert sub.session_ids() == keep
    assert sub.manifest.n_subjects == 4
    assert all(seg.session_id in keep for seg in sub.segments)


# ---------------------------------------------------------------------------
# Triplet sampling and anchors
# ---------------------------------------------------------------------------

def test_sample_triplets_single_combination():
    segs = [
        make_segment(0, NoiseLevel.QUIET),
        make_segment(1, NoiseLevel.DB75),
        make_segment(2, NoiseLevel.QUIET),
    ]
    rng = np.random.default_rng(0)
    triplets = sample_triplets(segs, {NoiseLevel.DB75}, count=10, rng=rng)
    assert len(triplets) == 1
    t = triplets[0]
    t.validate()
    assert t.s_n.order_index == 1
    assert {t.s_q1.order_index, t.s_q2.order_index} == {0, 2}


def test_sample_triplets_skip_semantics():
    rng = np.random.default_rng(0)
    one_quiet = [make_segment(0, NoiseLevel.QUIET), make_segment(1, NoiseLevel.DB75)]
    assert sample_triplets(one_quiet, {NoiseLevel.DB75}, 5, rng) == []
    wrong_level = [
        make_segment(0, NoiseLevel.QUIET),
        make_segment(1, NoiseLevel.QUIET),
        make_segment(2, NoiseLevel.DB75),
    ]
    assert sample_triplets(wrong_level, {NoiseLevel.DB55}, 5, rng) == []


def test_sample_triplets_rejects_bad_filter():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidConfig):
        sample_triplets([], set(), 1, rng)
    with pytest.raises(InvalidConfig):
        sample_triplets([], {NoiseLevel.QUIET}, 1, rng)


def test_sampled_triplets_satisfy_invariants_on_random_data():
    data = generate_synthetic(small_config(n_subjects=10, seed=9))
    rng = np.random.default_rng(4)
    for subject_id, segs in data.segments_by_subject().items():
        for noise_filter in ({NoiseLevel.DB75}, set(NOISY_LEVELS)):
            for t in sample_triplets(segs, noise_filter, 6, rng):
                t.validate()
                assert t.s_n.noise_level in noise_filter
                assert t.s_n.subject_id == subject_id


def test_sample_triplets_without_replacement():
    segs = [
        make_segment(0, NoiseLevel.QUIET),
        make_segment(1, NoiseLevel.QUIET),
        make_segment(2, NoiseLevel.QUIET),
        make_segment(3, NoiseLevel.DB75),
        make_segment(4, NoiseLevel.DB65),
    ]
    rng = np.random.default_rng(1)
    triplets = sample_triplets(segs, set(NOISY_LEVELS), count=100, rng=rng)
    assert len(triplets) == 6  # 2 noisy * C(3,2) quiet pairs
    combos = {(t.s_n.order_index, frozenset((t.s_q1.order_index, t.s_q2.order_index)))
              for t in triplets}
    assert len(combos) == 6


def test_select_anchor_first_quiet():
    segs = [
        make_segment(0, NoiseLevel.QUIET),
        make_segment(1, NoiseLevel.DB65),
        make_segment(2, NoiseLevel.QUIET),
    ]
    assert select_anchor(segs).order_index == 0
    # invariant under permutation of later segments
    assert select_anchor(segs[::-1]).order_index == 0


def test_select_anchor_errors_and_single_quiet():
    noisy = [make_segment(0, NoiseLevel.DB55), make_segment(1, NoiseLevel.DB75)]
    with pytest.raises(NoQuietSegment):
        select_anchor(noisy)
    segs = noisy + [make_segment(2, NoiseLevel.QUIET)]
    assert select_anchor(segs).order_index == 2


# ---------------------------------------------------------------------------
# Validation catches corrupted datasets
# ---------------------------------------------------------------------------

def test_validate_rejects_duplicate_order_index():
    manifest = DatasetManifest(
        format_version=1, feature_dim=2, fps=5, min_frames=125, max_frames=175,
        age_min=18, age_max=88, n_subjects=2, n_sessions=1, n_segments=2,
    )
    subjects = {"s0": SubjectRecord("s0", 30, 0), "s1": SubjectRecord("s1", 40, 1)}
    sessions = {"c0": SessionRecord("c0", ("s0", "s1"), [(NoiseLevel.QUIET, 30)])}
    segments = [make_segment(0, NoiseLevel.QUIET), make_segment(0, NoiseLevel.DB55)]
    with pytest.raises(FormatError):
        Dataset(manifest, subjects, sessions, segments).validate()
