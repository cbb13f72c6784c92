import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from farfield.audio import FeatureMatrix
from farfield.reseg import (
    OverlapMask,
    QMatrix,
    VbConfig,
    assign_speakers,
    filter_short,
    heuristic_overlap,
    init_q,
    oracle_overlap,
    overlap_from_spans,
    read_overlap_spans,
    vb_resegment,
)
from farfield.segments import Segment
from farfield.simulate import SceneSpec, simulate_scene


def test_init_q_single_speaker():
    q = init_q([Segment(0.0, 2.0, "a")], 200)
    np.testing.assert_array_equal(q.q, np.ones((200, 1)))


def test_init_q_disjoint_halves_and_gaps():
    q = init_q([Segment(0.0, 1.0, "a"), Segment(1.0, 0.5, "b")], 200)
    np.testing.assert_array_equal(q.q[:100], np.tile([1.0, 0.0], (100, 1)))
    np.testing.assert_array_equal(q.q[100:150], np.tile([0.0, 1.0], (50, 1)))
    assert np.all(q.q[150:] == 0)


def test_init_q_conflict_splits_at_midpoint():
    q = init_q([Segment(0.0, 1.0, "a"), Segment(0.6, 1.0, "b")], 200)
    labels = np.argmax(q.q, axis=1)
    assert np.all(labels[:80] == 0) and np.all(labels[80:160] == 1)
    with pytest.raises(ValueError):
        init_q([Segment(0, 1, "z")], 100, speakers=["a"])


def test_config_validation():
    with pytest.raises(ValueError):
        VbConfig(loop_prob=1.0)
    with pytest.raises(ValueError):
        VbConfig(num_iters=0)


def _two_speaker_features(seed, turns=10, turn_len=200, dim=20, sep=1.0):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(2, dim)) * sep
    truth = np.repeat(np.arange(turns) % 2, turn_len)
    x = means[truth] + rng.normal(size=(len(truth), dim))
    return x, truth


def _q_from_labels(labels, num_spk=2):
    q = np.zeros((len(labels), num_spk))
    q[np.arange(len(labels)), labels] = 1.0
    return QMatrix(q, tuple(f"s{k}" for k in range(num_spk)))


def test_vb_single_speaker_is_trivial():
    x = np.random.default_rng(0).normal(size=(300, 5))
    q0 = QMatrix(np.ones((300, 1)), ("a",))
    np.testing.assert_array_equal(vb_resegment(FeatureMatrix(x, 0.01), q0).q, np.ones((300, 1)))


def test_vb_rows_sum_to_one_on_speech_frames():
    x, truth = _two_speaker_features(1)
    q0 = _q_from_labels(truth)
    q0 = QMatrix(np.where(np.arange(len(truth))[:, None] % 7 == 0, 0.0, q0.q), q0.speakers)
    q = vb_resegment(FeatureMatrix(x, 0.01), q0)
    speech = q0.speech
    np.testing.assert_allclose(q.q[speech].sum(axis=1), 1.0, atol=1e-6)
    assert np.all(q.q[~speech] == 0)


@pytest.mark.parametrize("seed", range(3))
def test_vb_repairs_boundary_errors(seed):
    x, truth = _two_speaker_features(seed)
    noisy = truth.copy()
    starts = np.flatnonzero(np.diff(truth)) + 1
    for s in starts:
        noisy[s : s + 20] = truth[s - 1]  # previous speaker bleeds into the turn
    before = np.mean(noisy != truth)
    assert before == pytest.approx(0.09, abs=0.02)
    q = vb_resegment(FeatureMatrix(x, 0.01), _q_from_labels(noisy))
    after = np.mean(np.argmax(q.q, axis=1) != truth)
    assert after < before


def test_vb_strong_loop_prior_keeps_correct_labels():
    x, truth = _two_speaker_features(4)
    q = vb_resegment(FeatureMatrix(x, 0.01), _q_from_labels(truth), VbConfig(loop_prob=0.9999))
    assert np.mean(np.argmax(q.q, axis=1) == truth) >= 0.99


def test_vb_errors():
    x = np.zeros((10, 3))
    with pytest.raises(ValueError):
        vb_resegment(FeatureMatrix(x, 0.01), QMatrix(np.zeros((10, 2)), ("a", "b")))
    with pytest.raises(ValueError):
        vb_resegment(FeatureMatrix(x[:5], 0.01), QMatrix(np.ones((10, 1)), ("a",)))


def test_oracle_overlap_on_constructed_reference():
    ref = [Segment(0.0, 7.0, "a"), Segment(5.0, 5.0, "b")]
    mask = oracle_overlap(ref, 1000)
    assert mask.num_frames == 1000
    np.testing.assert_array_equal(np.flatnonzero(mask.flags), np.arange(500, 700))


def test_oracle_overlap_single_speaker_scene():
    _, truth = simulate_scene(SceneSpec(num_speakers=1, num_arrays=1, channels_per_array=1, duration_sec=10, seed=2))
    mask = oracle_overlap(truth.reference, truth.num_frames)
    assert mask.num_frames == truth.num_frames
    assert not mask.flags.any()


def test_overlap_span_file(tmp_path):
    path = tmp_path / "ov.txt"
    path.write_text("5.00 2.00\n\n8.5 0.5\n")
    mask = overlap_from_spans(read_overlap_spans(path), 1000)
    assert mask.flags.sum() == 250
    path.write_text("5.00\n")
    with pytest.raises(ValueError, match=":1:"):
        read_overlap_spans(path)


def test_heuristic_overlap_rule():
    mask = heuristic_overlap(np.array([0.95, 0.95, 0.5]), np.array([0.6, 0.1, 0.9]))
    np.testing.assert_array_equal(mask.flags, [True, False, False])


def test_assign_top_two_on_overlap():
    row = np.array([[0.5, 0.3, 0.15, 0.05]])
    q = QMatrix(row, ("s0", "s1", "s2", "s3"))
    speech = [Segment(0.0, 0.01)]
    assert {s.label for s in assign_speakers(q, OverlapMask([True]), speech)} == {"s0", "s1"}
    assert {s.label for s in assign_speakers(q, OverlapMask([False]), speech)} == {"s0"}


def test_assign_tie_prefers_lower_index():
    q = QMatrix(np.array([[0.4, 0.4, 0.2]]), ("a", "b", "c"))
    assert [s.label for s in assign_speakers(q, OverlapMask([False]), [Segment(0.0, 0.01)])] == ["a"]
    q = QMatrix(np.array([[0.2, 0.4, 0.4]]), ("a", "b", "c"))
    assert {s.label for s in assign_speakers(q, OverlapMask([True]), [Segment(0.0, 0.01)])} == {"b", "c"}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), spk=st.integers(1, 5))
def test_assign_speaker_counts(seed, spk):
    rng = np.random.default_rng(seed)
    n = 300
    q = QMatrix(rng.dirichlet(np.ones(spk), size=n), tuple(f"s{k}" for k in range(spk)))
    overlap = OverlapMask(rng.random(n) < 0.3)
    speech = [Segment(0.5, 1.5), Segment(2.2, 0.5)]
    segs = assign_speakers(q, overlap, speech)
    count = np.zeros(n, dtype=int)
    for s in segs:
        count[int(round(s.onset / 0.01)) : int(round(s.end / 0.01))] += 1
    active = np.zeros(n, dtype=bool)
    active[50:200] = active[220:270] = True
    assert count.max() <= 2
    assert np.all(count[~active] == 0)
    expect = np.where(overlap.flags & active, min(2, spk), active.astype(int))
    np.testing.assert_array_equal(count, expect)


def test_assign_rejects_length_mismatch():
    q = QMatrix(np.ones((5, 1)), ("a",))
    with pytest.raises(ValueError):
        assign_speakers(q, OverlapMask(np.zeros(4)), [])


def test_filter_short_boundaries():
    segs = [Segment(0.0, 0.15, "a"), Segment(1.0, 0.2, "a"), Segment(2.0, 0.19999999, "b"), Segment(3.0, 1.0, "b")]
    kept = filter_short(segs)
    assert [s.onset for s in kept] == [1.0, 3.0]
    assert filter_short([]) == []


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0.001, 2.0)), max_size=30))
def test_filter_short_idempotent_and_exact(pairs):
    segs = [Segment(on, dur, "x") for on, dur in pairs]
    once = filter_short(segs)
    assert filter_short(once) == once
    assert once == [s for s in segs if s.duration >= 0.2 - 1e-9]
