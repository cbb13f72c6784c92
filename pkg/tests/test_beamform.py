import numpy as np
import pytest

from farfield.audio import MultichannelAudio
from farfield.beamform import TdoaTrack, channel_weights, delay_and_sum, gcc_phat, track_tdoa


def _shift(x, d):
    """y(t) = x(t - d), zero filled."""
    y = np.zeros_like(x)
    if d >= 0:
        y[d:] = x[: len(x) - d]
    else:
        y[:d] = x[-d:]
    return y


def test_gcc_phat_constructed_shift():
    x = np.random.default_rng(0).normal(size=8000)
    delay, conf = gcc_phat(x, _shift(x, 5), 50)
    assert delay == 5
    delay, _ = gcc_phat(x, _shift(x, -12), 50)
    assert delay == -12


def test_gcc_phat_identical():
    x = np.random.default_rng(1).normal(size=4000)
    delay, conf = gcc_phat(x, x, 30)
    assert delay == 0
    assert conf == pytest.approx(1.0)


def test_gcc_phat_silent_and_mismatched():
    assert gcc_phat(np.zeros(100), np.zeros(100), 10) == (0, 0.0)
    with pytest.raises(ValueError):
        gcc_phat(np.zeros(100), np.zeros(99), 10)


def test_gcc_phat_independent_noise_low_confidence():
    rng = np.random.default_rng(2)
    confs = [gcc_phat(rng.normal(size=8000), rng.normal(size=8000), 480)[1] for _ in range(100)]
    assert np.mean(confs) < 0.2


def _scene(delays, n=16000 * 3, seed=3):
    x = np.random.default_rng(seed).normal(size=n)
    return x, MultichannelAudio(np.stack([_shift(x, d) for d in delays]), 16000)


def test_track_constant_delay():
    _, audio = _scene([0, 7, -3])
    track = track_tdoa(audio)
    assert track.num_blocks == 6
    assert np.all(track.delays[:, 1] == 7)
    assert np.all(track.delays[:, 2] == -3)
    assert np.all(track.delays[:, 0] == 0)


def test_track_switching_delay():
    rng = np.random.default_rng(4)
    x = rng.normal(size=16000 * 5)
    half = len(x) // 2
    other = np.concatenate([_shift(x, 7)[:half], _shift(x, -7)[half:]])
    track = track_tdoa(MultichannelAudio(np.stack([x, other]), 16000))
    change = half // track.block_len
    d = track.delays[:, 1]
    assert np.all(d[: change - 2] == 7)
    assert np.all(d[change + 2 :] == -7)


def test_track_single_block_and_errors():
    _, audio = _scene([0, 4], n=8000)
    track = track_tdoa(audio)
    assert track.num_blocks == 1
    with pytest.raises(ValueError):
        track_tdoa(MultichannelAudio(np.zeros((2, 100)), 16000))
    with pytest.raises(ValueError):
        track_tdoa(MultichannelAudio(np.zeros((1, 16000)), 16000))


def test_low_confidence_blocks_hold_previous_delay():
    rng = np.random.default_rng(5)
    x = rng.normal(size=16000 * 3)
    other = _shift(x, 6)
    other[8000:16000] = rng.normal(size=8000)  # block 1 unrelated
    track = track_tdoa(MultichannelAudio(np.stack([x, other]), 16000), threshold=0.3)
    assert track.confidence[1, 1] < 0.3
    assert np.all(track.delays[:, 1] == 6)


def test_identity_on_identical_channels():
    x = np.random.default_rng(6).normal(size=16000)
    audio = MultichannelAudio(np.stack([x, x, x]), 16000)
    out = delay_and_sum(audio, track_tdoa(audio))
    np.testing.assert_allclose(out.samples[0], x, atol=1e-12)


def test_weights_sum_to_one_and_uniform_fallback():
    track = TdoaTrack(np.zeros((2, 3), int), np.zeros((2, 3)), 100, 16000)
    np.testing.assert_allclose(channel_weights(track), [1 / 3] * 3)
    track = TdoaTrack(np.zeros((2, 3), int), np.array([[0.5, 0.2, 0.9], [0.1, 0.3, 0.4]]), 100, 16000)
    assert channel_weights(track).sum() == pytest.approx(1.0, abs=1e-15)


def test_snr_gain_with_correct_delays():
    rng = np.random.default_rng(7)
    n = 16000 * 4
    clean = rng.normal(size=n)
    delays = [0, 3, -5, 9]
    images = np.stack([_shift(clean, d) for d in delays])
    noise = rng.normal(size=images.shape)
    audio = MultichannelAudio(images + noise, 16000)
    track = track_tdoa(audio)
    assert np.all(track.delays == np.array(delays)[None, :])
    speech_out = delay_and_sum(MultichannelAudio(images, 16000), track).samples[0]
    noise_out = delay_and_sum(MultichannelAudio(noise, 16000), track, channel_weights(track)).samples[0]
    edge = slice(100, -100)
    gain = 10 * np.log10(np.sum(speech_out[edge] ** 2) / np.sum(noise_out[edge] ** 2))
    single = 10 * np.log10(np.sum(images[0, edge] ** 2) / np.sum(noise[0, edge] ** 2))
    assert gain - single >= 4.0


def test_dead_channel_is_ignored():
    rng = np.random.default_rng(8)
    x = rng.normal(size=16000 * 2)
    live = np.stack([x + 0.3 * rng.normal(size=len(x)), _shift(x, 4) + 0.3 * rng.normal(size=len(x))])
    audio = MultichannelAudio(np.vstack([live, np.zeros((1, len(x)))]), 16000)
    track = track_tdoa(audio)
    w = channel_weights(track)
    assert w[2] < 1e-6
    without = delay_and_sum(MultichannelAudio(live, 16000), track_tdoa(MultichannelAudio(live, 16000)))
    with_dead = delay_and_sum(audio, track)
    assert np.sqrt(np.mean((with_dead.samples - without.samples) ** 2)) < 1e-3


def test_time_invariance():
    rng = np.random.default_rng(9)
    x = rng.normal(size=16000 * 2 + 50)
    chans = np.stack([x, _shift(x, 3)])
    k = 40
    a = MultichannelAudio(chans[:, k:], 16000)
    b = MultichannelAudio(chans[:, :-k], 16000)
    out_a = delay_and_sum(a, track_tdoa(a)).samples[0]
    out_b = delay_and_sum(b, track_tdoa(b)).samples[0]
    np.testing.assert_allclose(out_b[k + 20 : -20], out_a[20 : -k - 20], atol=1e-9)
