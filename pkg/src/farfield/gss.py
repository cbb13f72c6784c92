"""Guided source separation: activity-constrained complex angular central
Gaussian mixture (cACGMM) mask estimation followed by mask-based MVDR."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import lgamma

import numpy as np

from .audio import MultichannelAudio, Spectrogram, istft, stft
from .segments import Segment, labels_of

NOISE_CLASS = "<noise>"
LOADING = 1e-10  # B loading, relative to trace / D
MVDR_LOADING = 1e-6  # noise covariance loading, relative to trace / D
_TINY = 1e-20


@dataclass(frozen=True)
class GssConfig:
    context_sec: float = 20.0
    iterations: int = 20
    fft_size: int = 1024
    frame_shift: int = 256

    def __post_init__(self):
        if self.context_sec < 0:
            raise ValueError("context_sec must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class ActivityPattern:
    """``active[k, t]`` over the processed region; the last class is noise."""

    active: np.ndarray
    classes: tuple
    region: tuple  # (start_sec, end_sec) in the recording
    frame_shift_sec: float

    @property
    def num_frames(self) -> int:
        return self.active.shape[1]


@dataclass
class CacgmmParams:
    shape: np.ndarray  # B: (freqs, classes, D, D)
    weights: np.ndarray  # pi: (frames, classes)
    log_likelihood: list = field(default_factory=list)


def frame_centres(num_frames: int, fft_size: int, frame_shift: int, sample_rate: int) -> np.ndarray:
    """Centre time (s) of each STFT frame, accounting for the leading pad."""
    return (np.arange(num_frames) * frame_shift + frame_shift - fft_size / 2) / sample_rate


def processing_region(target: Segment, context_sec: float, duration_sec: float) -> tuple:
    return max(0.0, target.onset - context_sec), min(duration_sec, target.end + context_sec)


def build_activity(segments, target: Segment, context_sec: float, centres: np.ndarray,
                   region_start: float = 0.0) -> ActivityPattern:
    """Per-speaker activity on frames whose centres (seconds, relative to
    ``region_start``) fall inside that speaker's segments.

    Speakers with no segment in the region are dropped; the target speaker
    is always kept and the noise class is active everywhere.
    """
    if not any(s == target for s in segments):
        raise ValueError(f"target {target} not among the segments")
    t = centres + region_start
    region = (region_start, region_start + (centres[-1] - centres[0] if len(centres) else 0.0))
    classes, rows = [], []
    for label in labels_of(segments):
        row = np.zeros(len(t), dtype=bool)
        for seg in segments:
            if seg.label == label:
                row |= (t >= seg.onset) & (t < seg.end)
        if row.any() or label == target.label:
            classes.append(label)
            rows.append(row)
    target_row = classes.index(target.label)
    rows[target_row] |= (t >= target.onset) & (t < target.end)
    classes.append(NOISE_CLASS)
    rows.append(np.ones(len(t), dtype=bool))
    shift = float(centres[1] - centres[0]) if len(centres) > 1 else 0.0
    return ActivityPattern(np.array(rows), tuple(classes), region, shift)


def _normalize_observations(spec: np.ndarray):
    """(F, T, D) → unit-norm z and a validity mask of non-silent bins."""
    norm = np.linalg.norm(spec, axis=-1)
    valid = norm > _TINY
    z = np.where(valid[..., None], spec / np.where(valid, norm, 1.0)[..., None], 0.0)
    return z, valid


def _pairs(d: int):
    return [(i, j) for i in range(d) for j in range(i + 1, d)]


def pair_features(z: np.ndarray) -> np.ndarray:
    """Real features of z z^H per (f, t): |z_i|^2, then Re and Im of
    conj(z_i) z_j for i < j. Shape (F, T, D^2)."""
    d = z.shape[-1]
    cols = [np.abs(z[:, :, i]) ** 2 for i in range(d)]
    for i, j in _pairs(d):
        p = z[:, :, i].conj() * z[:, :, j]
        cols += [p.real, p.imag]
    return np.stack(cols, axis=-1)


def _quadratic(feats: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """z^H M z for Hermitian M (F, K, D, D) as a real matmul: (K, F, T)."""
    d = mats.shape[-1]
    coef = [mats[:, :, i, i].real for i in range(d)]
    for i, j in _pairs(d):
        coef += [2 * mats[:, :, i, j].real, -2 * mats[:, :, i, j].imag]
    coef = np.stack(coef, axis=-1)  # (F, K, R)
    return (coef @ feats.swapaxes(1, 2)).transpose(1, 0, 2)


def _outer_sum(weight: np.ndarray, feats: np.ndarray, d: int) -> np.ndarray:
    """Σ_t w_kft z_ftd conj(z_fte) → (F, K, D, D), from pair features."""
    acc = weight.transpose(1, 0, 2) @ feats  # (F, K, R)
    out = np.empty(acc.shape[:2] + (d, d), dtype=np.complex128)
    for i in range(d):
        out[:, :, i, i] = acc[:, :, i]
    for n, (i, j) in enumerate(_pairs(d)):
        val = acc[:, :, d + 2 * n] - 1j * acc[:, :, d + 2 * n + 1]
        out[:, :, i, j] = val
        out[:, :, j, i] = val.conj()
    return out


def _log_components(feats, valid, shape):
    """log cACG density of every class at every (f, t): (K, F, T)."""
    d = shape.shape[-1]
    inv = np.linalg.inv(shape)  # (F, K, D, D)
    quad = _quadratic(feats, inv)
    quad = np.maximum(quad, _TINY)
    logdet = np.linalg.slogdet(shape)[1]  # (F, K)
    const = lgamma(d) - d * np.log(np.pi)
    out = const - logdet.T[:, :, None] - d * np.log(quad)
    return np.where(valid[None], out, 0.0), quad


def cacgmm_em(spec: np.ndarray, activity: np.ndarray, iterations: int = 20):
    """Activity-guided cACGMM EM.

    ``spec`` is (freqs, frames, D) complex with D >= 2; ``activity`` is
    (classes, frames) boolean. Mixture weights are per frame and shared by
    all frequencies, which ties the class order across bins.

    Returns ``(params, masks)`` with masks shaped (classes, frames, freqs).
    """
    spec = np.asarray(spec, dtype=np.complex128)
    if spec.ndim != 3 or spec.shape[-1] < 2:
        raise ValueError("spectrogram must be (freqs, frames, D) with D >= 2")
    if not np.all(np.isfinite(spec)):
        raise ValueError("non-finite spectrogram")
    activity = np.asarray(activity, dtype=bool)
    num_f, num_t, d = spec.shape
    num_k = activity.shape[0]
    if activity.shape != (num_k, num_t):
        raise ValueError(f"activity must be (classes, {num_t})")
    if not activity.any(axis=0).all():
        raise ValueError("every frame needs at least one active class")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    z, valid = _normalize_observations(spec)
    feats = pair_features(z)
    pi = activity.T / activity.sum(axis=0)[:, None]  # (T, K)
    shape = np.broadcast_to(np.eye(d, dtype=np.complex128), (num_f, num_k, d, d)).copy()
    history = []

    def e_step():
        log_comp, quad = _log_components(feats, valid, shape)
        with np.errstate(divide="ignore"):
            log_pi = np.log(pi.T)[:, None, :]  # (K, 1, T)
        joint = log_comp + log_pi
        top = joint.max(axis=0)
        total = top + np.log(np.exp(joint - top).sum(axis=0))
        gamma = np.exp(joint - total)
        history.append(float(np.sum(np.where(valid, total, 0.0))))
        return gamma, quad

    gamma, quad = e_step()
    for _ in range(iterations):
        # M-step: shape matrices (one fixed-point step) then weights
        weight = np.where(valid[None], gamma / quad, 0.0)  # (K, F, T)
        scatter = _outer_sum(weight, feats, d)
        norm = np.maximum(np.where(valid[None], gamma, 0.0).sum(axis=2).T, _TINY)  # (F, K)
        shape = d * scatter / norm[:, :, None, None]
        shape = 0.5 * (shape + shape.conj().swapaxes(-1, -2))
        trace = np.maximum(np.einsum("fkdd->fk", shape).real, _TINY)
        shape = d * shape / trace[:, :, None, None]
        shape = shape + LOADING * np.eye(d)  # trace is d here
        shape = d * shape / np.einsum("fkdd->fk", shape).real[:, :, None, None]

        pi = gamma.mean(axis=1).T * activity.T
        pi = pi / np.maximum(pi.sum(axis=1, keepdims=True), _TINY)
        gamma, quad = e_step()

    masks = np.where(activity[:, :, None], gamma.transpose(0, 2, 1), 0.0)
    masks = masks / np.maximum(masks.sum(axis=0, keepdims=True), _TINY)
    return CacgmmParams(shape, pi, history), masks


@dataclass(frozen=True)
class MvdrResult:
    bins: np.ndarray  # (freqs, frames)
    ref_channel: int
    fallback: bool


def mvdr_extract(spec: np.ndarray, target_mask: np.ndarray, other_mask: np.ndarray | None = None,
                 ref_channel: int | None = None) -> MvdrResult:
    """Souden MVDR from mask-weighted spatial covariances.

    ``spec`` is (freqs, frames, D); masks are (frames, freqs). The default
    interference mask is ``1 - target``. The reference channel defaults to
    the one with the most target-weighted energy. When the statistics are
    degenerate the masked reference channel is returned and flagged.
    """
    spec = np.asarray(spec, dtype=np.complex128)
    target = np.asarray(target_mask, dtype=np.float64).T  # (F, T)
    other = 1.0 - target if other_mask is None else np.asarray(other_mask, dtype=np.float64).T
    d = spec.shape[-1]
    energy = np.einsum("ft,ftd->d", target, np.abs(spec) ** 2)
    if ref_channel is None:
        ref_channel = int(np.argmax(energy))
    fallback_out = target * spec[:, :, ref_channel]
    if target.sum() <= _TINY or other.sum() <= _TINY:
        return MvdrResult(fallback_out, ref_channel, True)

    def covariance(mask):
        cov = _outer_sum(mask[None], feats, d)[:, 0]
        return cov / np.maximum(mask.sum(axis=1), _TINY)[:, None, None]

    feats = pair_features(spec)
    phi_t = covariance(target)
    phi_n = covariance(other)
    load = MVDR_LOADING * np.einsum("fdd->f", phi_n).real / d
    phi_n = phi_n + load[:, None, None] * np.eye(d)
    try:
        numer = np.linalg.solve(phi_n, phi_t)
    except np.linalg.LinAlgError:
        return MvdrResult(fallback_out, ref_channel, True)
    trace = np.einsum("fdd->f", numer)
    ok = np.abs(trace) > _TINY
    if not ok.any() or not np.all(np.isfinite(numer)):
        return MvdrResult(fallback_out, ref_channel, True)
    w = np.where(ok[:, None], numer[:, :, ref_channel] / np.where(ok, trace, 1.0)[:, None], 0.0)
    out = np.einsum("fd,ftd->ft", w.conj(), spec)
    out = np.where(ok[:, None], out, fallback_out)
    return MvdrResult(out, ref_channel, False)


# --------------------------------------------------------------------------
# End to end


def stack_arrays(audios) -> MultichannelAudio:
    """All channels of all arrays as one observation, trimmed to the shortest."""
    audios = list(audios)
    if not audios:
        raise ValueError("need at least one array")
    rates = {a.sample_rate for a in audios}
    if len(rates) != 1:
        raise ValueError("arrays must share a sample rate")
    n = min(a.num_samples for a in audios)
    return MultichannelAudio(np.vstack([a.samples[:, :n] for a in audios]), audios[0].sample_rate)


@dataclass(frozen=True)
class GssResult:
    audio: MultichannelAudio
    ref_channel: int
    fallback: bool
    log_likelihood: list


class GssEnhancer:
    """Enhances utterances of one recording, reusing EM results for any
    utterance whose context region and class set match a previous one."""

    def __init__(self, audios, segments, config: GssConfig | None = None):
        self.config = config or GssConfig()
        self.stacked = stack_arrays(audios)
        self.segments = sorted(segments)
        self._cache = {}

    def _region(self, target: Segment):
        sr = self.stacked.sample_rate
        start, end = processing_region(target, self.config.context_sec, self.stacked.duration)
        a, b = int(round(start * sr)), int(round(end * sr))
        return a, max(b, a + self.config.fft_size)

    def _masks(self, a: int, b: int, target: Segment):
        cfg, sr = self.config, self.stacked.sample_rate
        region = MultichannelAudio(self.stacked.samples[:, a:b], sr)
        spec = stft(region, cfg.fft_size, cfg.frame_shift)
        centres = frame_centres(spec.num_frames, cfg.fft_size, cfg.frame_shift, sr)
        activity = build_activity(self.segments, target, cfg.context_sec, centres, a / sr)
        key = (a, b, activity.classes, activity.active.tobytes())
        if key not in self._cache:
            params, masks = cacgmm_em(spec.bins.transpose(2, 1, 0), activity.active, cfg.iterations)
            self._cache[key] = (spec, activity, params, masks)
        return self._cache[key]

    def enhance(self, target: Segment) -> GssResult:
        cfg, sr = self.config, self.stacked.sample_rate
        a, b = self._region(target)
        spec, activity, params, masks = self._masks(a, b, target)
        k = activity.classes.index(target.label)
        centres = frame_centres(spec.num_frames, cfg.fft_size, cfg.frame_shift, sr) + a / sr
        inside = (centres >= target.onset) & (centres < target.end)
        if not inside.any():
            inside[np.argmin(np.abs(centres - (target.onset + target.end) / 2))] = True

        # statistics from the utterance frames; output over every frame
        # touching the utterance samples
        idx = np.flatnonzero(inside)
        margin = -(-cfg.fft_size // cfg.frame_shift)
        t0, t1 = max(0, idx[0] - margin), min(spec.num_frames, idx[-1] + margin + 1)
        y = spec.bins[:, t0:t1].transpose(2, 1, 0)  # (F, T, D)
        gamma = masks[k, t0:t1]
        keep = inside[t0:t1, None]
        result = mvdr_extract(y, np.where(keep, gamma, 0.0), np.where(keep, 1.0 - gamma, 0.0))
        out = istft(Spectrogram(result.bins[None].transpose(0, 2, 1), cfg.frame_shift, cfg.fft_size, sr))
        # output sample i sits at region sample t0 * shift + i
        s0 = int(round(target.onset * sr)) - a - t0 * cfg.frame_shift
        s0 = max(0, s0)
        samples = out.samples[:, s0 : s0 + max(1, int(round(target.duration * sr)))]
        return GssResult(MultichannelAudio(samples, sr), result.ref_channel, result.fallback,
                         params.log_likelihood)


def gss_enhance(audios, segments, target: Segment, config: GssConfig | None = None) -> GssResult:
    return GssEnhancer(audios, segments, config).enhance(target)
