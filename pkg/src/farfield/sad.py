"""Speech activity detection: frame posteriors, multi-array fusion and
duration-constrained HMM smoothing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import FeatureMatrix, MultichannelAudio, frame_power_spectrum
from .segments import FRAME_SHIFT_SEC, Segment, frames_to_segments

SILENCE, SPEECH, GARBAGE = 0, 1, 2
EMISSION_FLOOR = 1e-10
GMM_ITERATIONS = 50
SMOOTH_FRAMES = 5


@dataclass(frozen=True)
class SadClassSet:
    classes: tuple = ("silence", "speech", "garbage")

    def __post_init__(self):
        if tuple(self.classes) != ("silence", "speech", "garbage"):
            raise ValueError("SAD classes are fixed to (silence, speech, garbage)")

    def index(self, name: str) -> int:
        return self.classes.index(name)


SAD_CLASSES = SadClassSet()


@dataclass(frozen=True)
class FramePosteriors:
    probs: np.ndarray  # (frames, 3)
    frame_shift_sec: float = FRAME_SHIFT_SEC

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != len(SAD_CLASSES.classes):
            raise ValueError(f"posteriors must be (frames, 3), got {probs.shape}")
        if not np.all(np.isfinite(probs)) or probs.min(initial=0.0) < -1e-12 or probs.max(initial=0.0) > 1 + 1e-12:
            raise ValueError("posterior entries must lie in [0, 1]")
        if probs.size and np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("posterior rows must sum to 1")
        if self.frame_shift_sec <= 0:
            raise ValueError("frame_shift_sec must be positive")
        object.__setattr__(self, "probs", np.clip(probs, 0.0, 1.0))

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def speech(self) -> np.ndarray:
        return self.probs[:, SPEECH]


@dataclass(frozen=True)
class SadHmmConfig:
    min_speech_sec: float = 0.3
    min_silence_sec: float = 0.3
    max_speech_sec: float = 20.0
    speech_prior: float = 0.5

    def __post_init__(self):
        if min(self.min_speech_sec, self.min_silence_sec, self.max_speech_sec) <= 0:
            raise ValueError("durations must be positive")
        if self.min_speech_sec > self.max_speech_sec:
            raise ValueError("min_speech_sec must not exceed max_speech_sec")
        if not 0.0 <= self.speech_prior <= 1.0:
            raise ValueError("speech_prior must be in [0, 1]")

    def frames(self, frame_shift: float):
        """(min speech, min silence, max speech) in frames, each at least 1."""
        to_frames = lambda sec: max(1, int(round(sec / frame_shift)))
        return to_frames(self.min_speech_sec), to_frames(self.min_silence_sec), to_frames(self.max_speech_sec)


# --------------------------------------------------------------------------
# Reference posterior source


def sad_features(audio: MultichannelAudio, fft_size: int = 512, frame_shift_sec: float = FRAME_SHIFT_SEC) -> FeatureMatrix:
    """Per-frame log-energy and spectral flatness of channel 0."""
    shift = int(round(frame_shift_sec * audio.sample_rate))
    power = frame_power_spectrum(audio.samples[0], fft_size, shift)
    floored = np.maximum(power, EMISSION_FLOOR)
    log_energy = np.log(floored.sum(axis=1))
    flatness = np.exp(np.mean(np.log(floored), axis=1)) / np.mean(floored, axis=1)
    return FeatureMatrix(np.column_stack([log_energy, flatness]), frame_shift_sec)


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    pad = width // 2
    padded = np.pad(x, ((pad, width - 1 - pad), (0, 0)), mode="edge")
    return np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(x.shape[1])], axis=1)


def reference_posteriors(features: FeatureMatrix) -> FramePosteriors:
    """Unsupervised two-component diagonal GMM over (log-energy, flatness).

    Initialisation is deterministic (split at the median log-energy); the
    louder component is speech. Garbage probability is always zero.
    """
    x = features.rows
    if x.shape[0] < 2:
        raise ValueError("need at least two frames")
    scale = x.std(axis=0)
    uniform = np.tile([0.5, 0.5, 0.0], (x.shape[0], 1))
    if scale[0] < 1e-8:
        return FramePosteriors(uniform, features.frame_shift_sec)
    z = (x - x.mean(axis=0)) / np.where(scale > 1e-8, scale, 1.0)

    loud = z[:, 0] > np.median(z[:, 0])
    if loud.all() or not loud.any():
        return FramePosteriors(uniform, features.frame_shift_sec)
    resp = np.column_stack([~loud, loud]).astype(np.float64)
    var_floor = 1e-3
    for _ in range(GMM_ITERATIONS):
        weight = resp.sum(axis=0) + 1e-10
        means = resp.T @ z / weight[:, None]
        var = np.maximum(resp.T @ z**2 / weight[:, None] - means**2, var_floor)
        log_lik = (
            np.log(weight / weight.sum())
            - 0.5 * np.sum(np.log(2 * np.pi * var), axis=1)
            - 0.5 * np.sum((z[:, None, :] - means[None]) ** 2 / var[None], axis=2)
        )
        log_lik -= log_lik.max(axis=1, keepdims=True)
        resp = np.exp(log_lik)
        resp /= resp.sum(axis=1, keepdims=True)

    speech_comp = int(np.argmax(means[:, 0]))
    speech = resp[:, speech_comp]
    probs = np.column_stack([1.0 - speech, speech, np.zeros_like(speech)])
    probs = _moving_average(probs, SMOOTH_FRAMES)
    probs /= probs.sum(axis=1, keepdims=True)
    return FramePosteriors(probs, features.frame_shift_sec)


# --------------------------------------------------------------------------
# Fusion


def fuse_posteriors(per_array, criterion: str = "max") -> FramePosteriors:
    per_array = list(per_array)
    if not per_array:
        raise ValueError("no posteriors to fuse")
    shifts = {p.frame_shift_sec for p in per_array}
    counts = {p.num_frames for p in per_array}
    if len(shifts) != 1 or len(counts) != 1:
        raise ValueError("posteriors must share frame count and frame shift")
    stacked = np.stack([p.probs for p in per_array])
    if criterion == "max":
        fused = stacked.max(axis=0)
    elif criterion == "mean":
        fused = stacked.mean(axis=0)
    else:
        raise ValueError(f"unknown fusion criterion {criterion!r}")
    return FramePosteriors(fused / fused.sum(axis=1, keepdims=True), per_array[0].frame_shift_sec)


# --------------------------------------------------------------------------
# Duration-constrained Viterbi


def emission_scores(post: FramePosteriors):
    """Log emission of the speech and non-speech states; garbage counts as non-speech."""
    speech = np.log(np.maximum(post.probs[:, SPEECH], EMISSION_FLOOR))
    other = np.log(np.maximum(post.probs[:, SILENCE] + post.probs[:, GARBAGE], EMISSION_FLOOR))
    return speech, other


def _log(p: float) -> float:
    return float(np.log(p)) if p > 0 else -np.inf


def viterbi_labels(post: FramePosteriors, config: SadHmmConfig) -> np.ndarray:
    """Most likely speech/non-speech frame labels under the duration HMM.

    States: silence chain N_1..N_n (N_n self-loops) and speech chain
    S_1..S_M, leaving speech only from S_k with k >= m. Transitions along
    legal paths carry no cost; the start picks N_n or S_1 by the prior.
    """
    num = post.num_frames
    m, n, big_m = config.frames(post.frame_shift_sec)
    if num == 0:
        return np.zeros(0, dtype=bool)
    if num < m:
        return np.full(num, post.speech.mean() > 0.5)
    e_speech, e_other = emission_scores(post)

    sil = np.full(n, -np.inf)
    sp = np.full(big_m, -np.inf)
    sil[-1] = _log(1.0 - config.speech_prior) + e_other[0]
    sp[0] = _log(config.speech_prior) + e_speech[0]
    stay = np.zeros(num, dtype=bool)  # N_n came from itself
    enter_from = np.zeros(num, dtype=np.int32)  # S_k index feeding N_1
    for t in range(1, num):
        exits = sp[m - 1 :]
        k = int(np.argmax(exits))
        enter = exits[k]
        enter_from[t] = k + m - 1
        from_prev = np.concatenate([[enter], sil[:-1]])
        new_sil = from_prev.copy()
        if sil[-1] >= from_prev[-1]:
            new_sil[-1] = sil[-1]
            stay[t] = True
        new_sp = np.empty_like(sp)
        new_sp[0] = sil[-1]
        new_sp[1:] = sp[:-1]
        sil = new_sil + e_other[t]
        sp = new_sp + e_speech[t]

    finals = np.concatenate([sil, np.where(np.arange(big_m) >= m - 1, sp, -np.inf)])
    state = int(np.argmax(finals))
    labels = np.zeros(num, dtype=bool)
    for t in range(num - 1, -1, -1):
        in_speech = state >= n
        labels[t] = in_speech
        if t == 0:
            break
        if in_speech:
            k = state - n
            state = n - 1 if k == 0 else state - 1
        elif state == n - 1 and stay[t]:
            continue
        elif state == 0:
            state = n + int(enter_from[t])
        else:
            state -= 1
    return labels


def viterbi_smooth(post: FramePosteriors, config: SadHmmConfig | None = None) -> list[Segment]:
    config = config or SadHmmConfig()
    return frames_to_segments(viterbi_labels(post, config), post.frame_shift_sec, "speech")


def detect_speech(audios, criterion: str = "max", config: SadHmmConfig | None = None) -> list[Segment]:
    """Reference posteriors per array, fused, then smoothed."""
    posts = [reference_posteriors(sad_features(a)) for a in audios]
    frames = min(p.num_frames for p in posts)
    posts = [FramePosteriors(p.probs[:frames], p.frame_shift_sec) for p in posts]
    return viterbi_smooth(fuse_posteriors(posts, criterion), config)
