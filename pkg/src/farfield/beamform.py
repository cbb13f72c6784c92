"""Weighted delay-and-sum beamforming with GCC-PHAT delay tracking.

A simplified BeamformIt-style front end: per block, each channel's delay
against the reference channel is the GCC-PHAT peak; the delay track is
hold-last-good filled and median smoothed, and channels are summed with
weights proportional to their average alignment confidence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .audio import MultichannelAudio

REFERENCE_CHANNEL = 0


@dataclass(frozen=True)
class TdoaTrack:
    """Per-block integer delays (samples) of each channel relative to channel 0.

    A positive delay ``d`` means the channel lags the reference:
    ``y_c(t) = x_ref(t - d)``.
    """

    delays: np.ndarray  # (blocks, channels) int
    confidence: np.ndarray  # (blocks, channels) in [0, 1]
    block_len: int  # samples
    sample_rate: int

    @property
    def block_len_sec(self) -> float:
        return self.block_len / self.sample_rate

    @property
    def num_blocks(self) -> int:
        return self.delays.shape[0]


def gcc_phat(ref_block: np.ndarray, other_block: np.ndarray, max_delay: int):
    """Delay of ``other_block`` relative to ``ref_block`` and a [0, 1] confidence.

    The PHAT cross-correlation is an average of unit phasors, so its peak is 1
    for identical blocks and near ``1/sqrt(n)`` for unrelated ones; that peak
    value is the confidence. Silent input gives ``(0, 0.0)``.
    """
    ref_block = np.asarray(ref_block, dtype=np.float64)
    other_block = np.asarray(other_block, dtype=np.float64)
    if ref_block.shape != other_block.shape:
        raise ValueError("GCC-PHAT blocks must have equal length")
    n = len(ref_block)
    nfft = 1 << int(np.ceil(np.log2(max(2 * n, 2))))
    cross = np.fft.rfft(other_block, nfft) * np.conj(np.fft.rfft(ref_block, nfft))
    mag = np.abs(cross)
    valid = mag > 1e-12 * max(mag.max(), 1e-300)
    if not valid.any() or mag.max() == 0:
        return 0, 0.0
    phat = np.where(valid, cross / np.where(valid, mag, 1.0), 0.0)
    # normalise so that a perfect match peaks at exactly 1
    weights = np.ones(len(phat))
    weights[1:-1] = 2.0
    cc = np.fft.irfft(phat, nfft) * nfft / np.sum(weights * valid)
    max_delay = int(min(max_delay, n - 1))
    lags = np.concatenate([cc[-max_delay:] if max_delay > 0 else cc[:0], cc[: max_delay + 1]])
    best = int(np.argmax(lags))
    delay = best - max_delay
    return delay, float(np.clip(lags[best], 0.0, 1.0))


def track_tdoa(
    audio: MultichannelAudio,
    block_len_sec: float = 0.5,
    max_delay_sec: float = 0.03,
    threshold: float = 0.1,
) -> TdoaTrack:
    if audio.num_channels < 2:
        raise ValueError("delay tracking needs at least two channels")
    block = int(round(block_len_sec * audio.sample_rate))
    if block < 1 or audio.num_samples < block:
        raise ValueError(f"audio ({audio.num_samples} samples) shorter than one block ({block})")
    max_delay = int(round(max_delay_sec * audio.sample_rate))
    num_blocks = audio.num_samples // block
    x = audio.samples
    delays = np.zeros((num_blocks, audio.num_channels), dtype=int)
    conf = np.zeros((num_blocks, audio.num_channels))
    for b in range(num_blocks):
        ref = x[REFERENCE_CHANNEL, b * block : (b + 1) * block]
        for c in range(audio.num_channels):
            if c == REFERENCE_CHANNEL:
                continue
            delays[b, c], conf[b, c] = gcc_phat(ref, x[c, b * block : (b + 1) * block], max_delay)
    others = [c for c in range(audio.num_channels) if c != REFERENCE_CHANNEL]
    conf[:, REFERENCE_CHANNEL] = conf[:, others].max(axis=1)

    held = delays.copy()
    for c in others:
        last = 0
        for b in range(num_blocks):
            if conf[b, c] >= threshold:
                last = delays[b, c]
            held[b, c] = last
    smoothed = median_filter(held, size=(3, 1), mode="nearest") if num_blocks >= 3 else held
    smoothed[:, REFERENCE_CHANNEL] = 0
    return TdoaTrack(smoothed.astype(int), conf, block, audio.sample_rate)


def channel_weights(track: TdoaTrack) -> np.ndarray:
    """Weights proportional to mean per-channel confidence, summing to one."""
    w = track.confidence.mean(axis=0)
    if not np.any(w > 0):
        w = np.ones_like(w)
    return w / w.sum()


def delay_and_sum(audio: MultichannelAudio, track: TdoaTrack, weights=None) -> MultichannelAudio:
    """Align every channel to the reference with the per-block delays and
    form the confidence-weighted sum. Output length equals input length."""
    if track.delays.shape[1] != audio.num_channels:
        raise ValueError("track channel count does not match audio")
    w = channel_weights(track) if weights is None else np.asarray(weights, dtype=np.float64)
    n = audio.num_samples
    out = np.zeros(n)
    t = np.arange(n)
    block_of = np.minimum(t // track.block_len, track.num_blocks - 1)
    for c in range(audio.num_channels):
        if w[c] == 0:
            continue
        src = t + track.delays[block_of, c]
        ok = (src >= 0) & (src < n)
        aligned = np.zeros(n)
        aligned[ok] = audio.samples[c, src[ok]]
        out += w[c] * aligned
    return MultichannelAudio(out[None, :], audio.sample_rate)


def beamform(audio: MultichannelAudio, block_len_sec: float = 0.5, max_delay_sec: float = 0.03,
             threshold: float = 0.1) -> MultichannelAudio:
    """Track delays then delay-and-sum; single-channel input passes through."""
    if audio.num_channels == 1:
        return audio
    block_len_sec = min(block_len_sec, audio.duration)
    return delay_and_sum(audio, track_tdoa(audio, block_len_sec, max_delay_sec, threshold))
