"""Overlap-aware resegmentation: VB-HMM refinement of a first-pass
speaker labelling, then one-or-two speaker assignment per frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .audio import FeatureMatrix
from .segments import FRAME_SHIFT_SEC, Segment, frames_to_segments, labels_of, sec_to_frame, segments_to_frames

MIN_SEGMENT_SEC = 0.2
VAR_FLOOR = 1e-4


@dataclass(frozen=True)
class QMatrix:
    q: np.ndarray  # (frames, speakers)
    speakers: tuple
    frame_shift_sec: float = FRAME_SHIFT_SEC

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != len(self.speakers):
            raise ValueError(f"Q must be (frames, {len(self.speakers)}), got {q.shape}")
        if q.size and (q.min() < -1e-12 or q.max() > 1 + 1e-12):
            raise ValueError("Q entries must lie in [0, 1]")
        object.__setattr__(self, "q", np.clip(q, 0.0, 1.0))
        object.__setattr__(self, "speakers", tuple(self.speakers))

    @property
    def num_frames(self) -> int:
        return self.q.shape[0]

    @property
    def speech(self) -> np.ndarray:
        return self.q.sum(axis=1) > 0


@dataclass(frozen=True)
class VbConfig:
    subspace_dim: int = 16
    loop_prob: float = 0.99
    downsample: int = 25
    num_iters: int = 1
    acoustic_scale: float = 0.1

    def __post_init__(self):
        if self.subspace_dim < 1 or self.downsample < 1:
            raise ValueError("subspace_dim and downsample must be >= 1")
        if not 0.0 <= self.loop_prob < 1.0:
            raise ValueError("loop_prob must be in [0, 1)")
        if self.num_iters < 1:
            raise ValueError("num_iters must be >= 1")
        if self.acoustic_scale <= 0:
            raise ValueError("acoustic_scale must be positive")


@dataclass(frozen=True)
class OverlapMask:
    flags: np.ndarray
    frame_shift_sec: float = FRAME_SHIFT_SEC

    def __post_init__(self):
        object.__setattr__(self, "flags", np.asarray(self.flags, dtype=bool))

    @property
    def num_frames(self) -> int:
        return len(self.flags)


def init_q(first_pass, num_frames: int, speakers=None, frame_shift: float = FRAME_SHIFT_SEC) -> QMatrix:
    """One-hot rows from first-pass labels; frames outside every segment are zero.

    Frames claimed by two segments with different labels are split at the
    midpoint of the shared span.
    """
    speakers = labels_of(first_pass) if speakers is None else list(speakers)
    index = {s: i for i, s in enumerate(speakers)}
    owner = np.full(num_frames, -1)
    for seg in sorted(first_pass):
        if seg.label not in index:
            raise ValueError(f"label {seg.label!r} not among speakers")
        a = max(0, min(num_frames, sec_to_frame(seg.onset, frame_shift)))
        b = max(0, min(num_frames, sec_to_frame(seg.end, frame_shift)))
        k = index[seg.label]
        span = owner[a:b]
        clash = np.flatnonzero((span >= 0) & (span != k))
        if clash.size:
            mid = (a + a + clash[-1] + 1) // 2
            span[(span < 0) & (np.arange(a, b) < mid)] = k
            owner[mid:b] = k
        else:
            span[:] = k
    q = np.zeros((num_frames, len(speakers)))
    has = owner >= 0
    q[np.flatnonzero(has), owner[has]] = 1.0
    return QMatrix(q, speakers, frame_shift)


def _subspace(x: np.ndarray, dim: int):
    """Mean, loading matrix V (top principal directions scaled by their
    standard deviations) and residual diagonal variance."""
    mu = x.mean(axis=0)
    cov = np.cov(x - mu, rowvar=False, bias=True).reshape(x.shape[1], x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][: min(dim, x.shape[1])]
    vals = np.maximum(vals[order], 0.0)
    v = vecs[:, order] * np.sqrt(vals)
    resid = np.maximum(np.diag(cov) - np.sum(v**2, axis=1), VAR_FLOOR * max(np.mean(np.diag(cov)), 1e-12))
    return mu, v, resid


def _forward_backward(log_lik: np.ndarray, log_trans: np.ndarray, log_init: np.ndarray) -> np.ndarray:
    n, s = log_lik.shape
    fwd = np.empty((n, s))
    bwd = np.zeros((n, s))
    fwd[0] = log_init + log_lik[0]
    for t in range(1, n):
        fwd[t] = logsumexp(fwd[t - 1][:, None] + log_trans, axis=0) + log_lik[t]
    for t in range(n - 2, -1, -1):
        bwd[t] = logsumexp(log_trans + (log_lik[t + 1] + bwd[t + 1])[None, :], axis=1)
    post = fwd + bwd
    return np.exp(post - logsumexp(post, axis=1, keepdims=True))


def vb_resegment(features: FeatureMatrix, q0: QMatrix, config: VbConfig | None = None) -> QMatrix:
    """Refine a Q-matrix with a VB-HMM whose speaker means live in a PCA subspace.

    Each outer iteration updates the speaker-factor posteriors from the
    current Q, then runs forward-backward on acoustically scaled,
    block-summed log-likelihoods. Non-speech rows stay zero.
    """
    config = config or VbConfig()
    if features.num_frames != q0.num_frames:
        raise ValueError(f"{features.num_frames} feature frames vs {q0.num_frames} Q rows")
    speech = q0.speech
    if not speech.any():
        raise ValueError("no speech frames to resegment")
    num_spk = len(q0.speakers)
    out = np.zeros_like(q0.q)
    if num_spk == 1:
        out[speech, 0] = 1.0
        return QMatrix(out, q0.speakers, q0.frame_shift_sec)

    x = features.rows[speech]
    gamma = q0.q[speech] / q0.q[speech].sum(axis=1, keepdims=True)
    mu, v, var = _subspace(x, config.subspace_dim)
    xc = x - mu
    inv_var = 1.0 / var
    vtv = (v * inv_var[:, None]).T @ v  # V' Σ⁻¹ V
    rho = (xc * inv_var) @ v  # per-frame projections
    g = -0.5 * (np.sum(xc**2 * inv_var, axis=1) + np.sum(np.log(2 * np.pi * var)))
    fa = config.acoustic_scale

    n = len(x)
    blocks = np.arange(n) // config.downsample
    num_blocks = blocks[-1] + 1
    loop = config.loop_prob
    trans = np.full((num_spk, num_spk), (1 - loop) / (num_spk - 1))
    np.fill_diagonal(trans, loop)
    with np.errstate(divide="ignore"):
        log_trans = np.log(trans)
    log_init = np.full(num_spk, -np.log(num_spk))

    for _ in range(config.num_iters):
        counts = gamma.sum(axis=0)
        log_lik = np.empty((n, num_spk))
        for s in range(num_spk):
            inv_l = np.linalg.inv(np.eye(v.shape[1]) + fa * counts[s] * vtv)
            alpha = fa * inv_l @ (rho.T @ gamma[:, s])
            log_lik[:, s] = g + rho @ alpha - 0.5 * np.trace((inv_l + np.outer(alpha, alpha)) @ vtv)
        block_lik = np.zeros((num_blocks, num_spk))
        np.add.at(block_lik, blocks, fa * log_lik)
        gamma = _forward_backward(block_lik, log_trans, log_init)[blocks]

    out[speech] = gamma / gamma.sum(axis=1, keepdims=True)
    return QMatrix(out, q0.speakers, q0.frame_shift_sec)


# --------------------------------------------------------------------------
# Overlap detection


def oracle_overlap(reference, num_frames: int, frame_shift: float = FRAME_SHIFT_SEC) -> OverlapMask:
    """Frames where more than one reference speaker is active."""
    count = np.zeros(num_frames, dtype=int)
    for label in labels_of(reference):
        count += segments_to_frames(reference, num_frames, frame_shift, label)
    return OverlapMask(count > 1, frame_shift)


def overlap_from_spans(spans, num_frames: int, frame_shift: float = FRAME_SHIFT_SEC) -> OverlapMask:
    """Mask from ``(onset, duration)`` spans."""
    segs = [Segment(on, dur, "overlap") for on, dur in spans]
    return OverlapMask(segments_to_frames(segs, num_frames, frame_shift), frame_shift)


def read_overlap_spans(path) -> list[tuple]:
    spans = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                onset, dur = float(parts[0]), float(parts[1])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: expected 'onset duration'") from None
            spans.append((onset, dur))
    return spans


def heuristic_overlap(speech_prob: np.ndarray, flatness: np.ndarray, threshold: float = 0.5,
                      frame_shift: float = FRAME_SHIFT_SEC) -> OverlapMask:
    """Weak stand-in detector: confident speech with an unusually flat spectrum.
    Two simultaneous voices fill in each other's spectral valleys."""
    n = min(len(speech_prob), len(flatness))
    return OverlapMask((np.asarray(speech_prob[:n]) > 0.9) & (np.asarray(flatness[:n]) > threshold), frame_shift)


# --------------------------------------------------------------------------
# Assignment


def assign_speakers(q: QMatrix, overlap: OverlapMask, speech) -> list[Segment]:
    """Argmax speaker on ordinary speech frames, top two on overlap frames.

    Ties go to the lower speaker index. Frames outside ``speech`` are left
    unassigned, overlap flags there are ignored.
    """
    n = q.num_frames
    if overlap.num_frames != n:
        raise ValueError(f"overlap mask has {overlap.num_frames} frames, Q has {n}")
    active = segments_to_frames(speech, n, q.frame_shift_sec)
    order = np.argsort(-q.q, axis=1, kind="stable")
    num_spk = len(q.speakers)
    take = np.zeros((n, num_spk), dtype=bool)
    rows = np.flatnonzero(active)
    take[rows, order[rows, 0]] = True
    if num_spk >= 2:
        both = np.flatnonzero(active & overlap.flags)
        take[both, order[both, 1]] = True
    out = []
    for k, label in enumerate(q.speakers):
        out += frames_to_segments(take[:, k], q.frame_shift_sec, label)
    return sorted(out)


def filter_short(segments, min_dur_sec: float = MIN_SEGMENT_SEC) -> list[Segment]:
    """Drop segments strictly shorter than ``min_dur_sec``."""
    return [s for s in segments if s.duration >= min_dur_sec - 1e-9]
