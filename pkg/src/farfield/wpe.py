"""Online multichannel weighted prediction error (WPE) dereverberation.

A recursive-least-squares variant of WPE: per frequency bin, a multichannel
linear predictor estimates the late reverberation of the current frame from
a delayed stack of past frames; the prediction is subtracted and the
predictor is updated with power-normalized, exponentially forgotten
statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import MultichannelAudio, istft, stft

POWER_FLOOR = 1e-10
DENOMINATOR_FLOOR = 1e-12


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    alpha: float = 0.9999
    psd_context: int = 0
    delta: float = 1.0  # R^-1 starts as I / delta

    def __post_init__(self):
        if self.taps < 1:
            raise ValueError(f"taps must be >= 1, got {self.taps}")
        if self.delay < 1:
            raise ValueError(f"delay must be >= 1, got {self.delay}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.psd_context < 0:
            raise ValueError(f"psd_context must be >= 0, got {self.psd_context}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class WpeState:
    """Recursive filter state.

    Shapes, with ``K = taps * channels``:
        inv_cov: (freqs, K, K), Hermitian
        filter: (freqs, K, channels)
        buffer: (taps + delay, freqs, channels), oldest frame first
        power_history: (psd_context + 1, freqs) recent per-frame powers
    """

    config: WpeConfig
    inv_cov: np.ndarray
    filter: np.ndarray
    buffer: np.ndarray
    power_history: np.ndarray = field(repr=False)
    frames_seen: int = 0

    @property
    def channels(self) -> int:
        return self.buffer.shape[2]

    @property
    def freqs(self) -> int:
        return self.buffer.shape[1]


def wpe_init(config: WpeConfig, channels: int, freqs: int) -> WpeState:
    k = config.taps * channels
    inv_cov = np.broadcast_to(np.eye(k, dtype=np.complex128) / config.delta, (freqs, k, k)).copy()
    return WpeState(
        config=config,
        inv_cov=inv_cov,
        filter=np.zeros((freqs, k, channels), dtype=np.complex128),
        buffer=np.zeros((config.taps + config.delay, freqs, channels), dtype=np.complex128),
        power_history=np.zeros((config.psd_context + 1, freqs)),
    )


def _stacked_context(state: WpeState) -> np.ndarray:
    """Frames t-delay ... t-delay-taps+1, newest first, as (freqs, taps*channels)."""
    cfg = state.config
    # buffer[-1] is frame t-1, so frame t-delay sits at index -delay
    stop = len(state.buffer) - cfg.delay + 1
    window = state.buffer[stop - cfg.taps : stop][::-1]
    return window.transpose(1, 0, 2).reshape(state.freqs, -1)


def wpe_step(state: WpeState, frame: np.ndarray) -> np.ndarray:
    """Dereverberate one STFT frame of shape ``(channels, freqs)`` in place of ``state``."""
    frame = np.asarray(frame, dtype=np.complex128)
    if frame.shape != (state.channels, state.freqs):
        raise ValueError(f"frame shape {frame.shape} != ({state.channels}, {state.freqs})")
    if not np.all(np.isfinite(frame)):
        raise ValueError("non-finite input frame")
    cfg = state.config
    y = frame.T  # (F, D)

    window = _stacked_context(state)
    estimate = y - np.einsum("fkd,fk->fd", state.filter.conj(), window)

    state.power_history = np.roll(state.power_history, -1, axis=0)
    state.power_history[-1] = np.mean(np.abs(y) ** 2, axis=1)
    filled = min(state.frames_seen + 1, len(state.power_history))
    power = np.maximum(state.power_history[-filled:].mean(axis=0), POWER_FLOOR)

    gain_num = np.einsum("fij,fj->fi", state.inv_cov, window)
    quad = np.einsum("fi,fi->f", window.conj(), gain_num).real
    denominator = cfg.alpha * power + quad
    update = (denominator >= DENOMINATOR_FLOOR) & np.any(window != 0, axis=1)
    if np.all(update):
        gain = gain_num / denominator[:, None]
        state.inv_cov -= gain[:, :, None] * gain_num.conj()[:, None, :]
        state.inv_cov /= cfg.alpha
        state.filter += gain[:, :, None] * estimate.conj()[:, None, :]
    elif np.any(update):
        idx = np.flatnonzero(update)
        gain = gain_num[idx] / denominator[idx, None]
        state.inv_cov[idx] = (
            state.inv_cov[idx] - gain[:, :, None] * gain_num[idx].conj()[:, None, :]
        ) / cfg.alpha
        state.filter[idx] += gain[:, :, None] * estimate[idx].conj()[:, None, :]

    state.buffer = np.roll(state.buffer, -1, axis=0)
    state.buffer[-1] = y
    state.frames_seen += 1
    return estimate.T


def wpe_process(
    audio: MultichannelAudio,
    config: WpeConfig | None = None,
    fft_size: int = 1024,
    frame_shift: int = 256,
    return_filters: bool = False,
):
    """STFT → framewise :func:`wpe_step` → iSTFT; output has the input's shape.

    With ``return_filters`` the per-frame prediction filters used for each
    output frame are also returned, shape ``(frames, freqs, K, channels)``.
    """
    config = config or WpeConfig()
    if audio.num_channels < 1:
        raise ValueError("WPE needs at least one channel")
    spec = stft(audio, fft_size, frame_shift)
    state = wpe_init(config, spec.num_channels, spec.num_freqs)
    out = np.empty_like(spec.bins)
    filters = [] if return_filters else None
    for t in range(spec.num_frames):
        if filters is not None:
            filters.append(state.filter.copy())
        out[:, t, :] = wpe_step(state, spec.bins[:, t, :])
    result = istft(spec.with_bins(out))
    if return_filters:
        return result, np.stack(filters)
    return result


def apply_filters(audio: MultichannelAudio, filters: np.ndarray, config: WpeConfig,
                  fft_size: int = 1024, frame_shift: int = 256) -> MultichannelAudio:
    """Apply a recorded sequence of WPE filters to another signal.

    WPE is linear given its filters, so re-applying the filters recorded on a
    mixture to one of its components yields that component's share of the
    output.
    """
    spec = stft(audio, fft_size, frame_shift)
    state = wpe_init(config, spec.num_channels, spec.num_freqs)
    out = np.empty_like(spec.bins)
    for t in range(spec.num_frames):
        window = _stacked_context(state)
        y = spec.bins[:, t, :].T
        out[:, t, :] = (y - np.einsum("fkd,fk->fd", filters[t].conj(), window)).T
        state.buffer = np.roll(state.buffer, -1, axis=0)
        state.buffer[-1] = y
    return istft(spec.with_bins(out))
