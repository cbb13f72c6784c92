import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from farfield.audio import MultichannelAudio, stft
from farfield.quality import direct_to_late_ratio
from farfield.simulate import SceneSpec, simulate_scene
from farfield.wpe import WpeConfig, wpe_init, wpe_process, wpe_step


def _frames(seed, n, channels=2, freqs=33):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, channels, freqs)) + 1j * rng.normal(size=(n, channels, freqs))


def test_config_validation():
    with pytest.raises(ValueError):
        WpeConfig(taps=0)
    with pytest.raises(ValueError):
        WpeConfig(delay=0)
    with pytest.raises(ValueError):
        WpeConfig(alpha=1.0)


def test_state_shapes():
    state = wpe_init(WpeConfig(taps=10), channels=4, freqs=257)
    assert state.inv_cov.shape == (257, 40, 40)
    assert state.filter.shape == (257, 40, 4)
    assert np.all(state.filter == 0)
    np.testing.assert_allclose(state.inv_cov[0], np.eye(40) / WpeConfig().delta)


def test_initial_output_is_identity():
    cfg = WpeConfig(taps=3, delay=2)
    state = wpe_init(cfg, 2, 33)
    frames = _frames(0, 5)
    # until a frame reaches the delayed context nothing can be predicted
    for t in range(cfg.delay):
        np.testing.assert_array_equal(wpe_step(state, frames[t]), frames[t])


def test_reinit_is_deterministic():
    cfg = WpeConfig(taps=3, delay=2)
    frames = _frames(1, 40)
    state = wpe_init(cfg, 2, 33)
    first = [wpe_step(state, f) for f in frames]
    state = wpe_init(cfg, 2, 33)
    second = [wpe_step(state, f) for f in frames]
    np.testing.assert_array_equal(np.array(first), np.array(second))


def test_zero_frames_leave_state_alone():
    cfg = WpeConfig(taps=3, delay=2)
    state = wpe_init(cfg, 2, 17)
    inv_cov, filt = state.inv_cov.copy(), state.filter.copy()
    for _ in range(10):
        out = wpe_step(state, np.zeros((2, 17)))
        assert np.all(out == 0)
    np.testing.assert_array_equal(state.inv_cov, inv_cov)
    np.testing.assert_array_equal(state.filter, filt)


def test_rejects_bad_frames():
    state = wpe_init(WpeConfig(), 2, 17)
    with pytest.raises(ValueError):
        wpe_step(state, np.zeros((3, 17)))
    bad = np.zeros((2, 17), dtype=complex)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        wpe_step(state, bad)


def test_inverse_covariance_stays_hermitian():
    state = wpe_init(WpeConfig(taps=4, delay=2), 2, 9)
    for f in _frames(2, 200, freqs=9):
        wpe_step(state, f)
    herm = state.inv_cov.conj().transpose(0, 2, 1)
    assert np.max(np.abs(state.inv_cov - herm)) <= 1e-6 * np.max(np.abs(state.inv_cov))
    assert np.all(np.isfinite(state.filter))


def test_zero_audio_gives_zero_output():
    out = wpe_process(MultichannelAudio(np.zeros((2, 8000)), 16000))
    assert out.samples.shape == (2, 8000)
    assert np.all(out.samples == 0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-4, 1e3))
def test_output_finite(seed, scale):
    x = np.random.default_rng(seed).normal(size=(2, 4000)) * scale
    out = wpe_process(MultichannelAudio(x, 16000), WpeConfig(taps=4))
    assert np.all(np.isfinite(out.samples))


def test_bit_identical_runs():
    x = np.random.default_rng(3).normal(size=(2, 6000))
    a = wpe_process(MultichannelAudio(x, 16000)).samples
    b = wpe_process(MultichannelAudio(x, 16000)).samples
    np.testing.assert_array_equal(a, b)


def test_white_noise_passes_through():
    # 500 frames of anechoic white noise at hop 256
    x = np.random.default_rng(4).normal(size=(2, 256 * 520))
    y = wpe_process(MultichannelAudio(x, 16000)).samples
    tail = slice(-256 * 200, None)
    ratio = np.sqrt(np.mean(y[:, tail] ** 2) / np.mean(x[:, tail] ** 2))
    assert 0.9 <= ratio <= 1.1


def test_step_output_matches_process():
    x = np.random.default_rng(5).normal(size=(2, 3000))
    audio = MultichannelAudio(x, 16000)
    spec = stft(audio, 1024, 256)
    state = wpe_init(WpeConfig(), 2, spec.num_freqs)
    frames = np.stack([wpe_step(state, spec.bins[:, t]) for t in range(spec.num_frames)], axis=1)
    from farfield.audio import istft

    np.testing.assert_allclose(istft(spec.with_bins(frames)).samples, wpe_process(audio).samples)


def test_reverberant_scene_improves_direct_to_late():
    audios, truth = simulate_scene(
        SceneSpec(num_speakers=1, num_arrays=1, channels_per_array=2, duration_sec=12,
                  reverb_t60_sec=0.5, snr_db=30, seed=11)
    )
    early = truth.images(0, "early").sum(axis=0)
    before = direct_to_late_ratio(audios[0].samples, early)
    after = direct_to_late_ratio(wpe_process(audios[0]).samples, early)
    assert after >= before + 3.0
