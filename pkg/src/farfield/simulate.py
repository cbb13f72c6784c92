"""Seeded synthetic multi-array conversation scenes.

Speakers are not real voices: each one is a glottal-like pulse train plus
noise pushed through a fixed speaker-specific resonator bank and modulated at
syllable rate. That is enough to give every speaker a stable spectral
signature, which is all the enhancement and diarization checks rely on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .audio import MultichannelAudio
from .segments import FRAME_SHIFT_SEC, Segment, label_frames, sort_segments

EARLY_SPLIT_SEC = 0.05


@dataclass(frozen=True)
class SceneSpec:
    num_speakers: int = 4
    num_arrays: int = 2
    channels_per_array: int = 4
    duration_sec: float = 30.0
    overlap_ratio: float = 0.0
    snr_db: float = 20.0
    reverb_t60_sec: float = 0.0
    seed: int = 0
    sample_rate: int = 16000
    # each turn is masked by white noise at this SNR on one array, arrays
    # taking turns (None = off)
    masking_snr_db: float | None = None
    min_turn_sec: float = 1.5
    max_turn_sec: float = 4.0
    mean_gap_sec: float = 0.6
    max_array_delay: int = 160
    max_mic_delay: int = 8

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.num_arrays < 1 or self.channels_per_array < 1:
            raise ValueError("need at least one array with one channel")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ValueError(f"overlap_ratio must be in [0, 1), got {self.overlap_ratio}")
        if self.overlap_ratio > 0 and self.num_speakers < 2:
            raise ValueError("overlap_ratio > 0 needs at least two speakers")
        if self.reverb_t60_sec < 0:
            raise ValueError("reverb_t60_sec must be >= 0")
        if self.duration_sec <= 0:
            raise ValueError("duration_sec must be positive")
        if not 0 < self.min_turn_sec <= self.max_turn_sec:
            raise ValueError("need 0 < min_turn_sec <= max_turn_sec")


@dataclass
class SceneTruth:
    """Ground truth for a simulated scene.

    ``rirs[a][c][k]`` is the impulse response from speaker ``k`` to channel
    ``c`` of array ``a``, direct path included. ``noise[a]`` holds everything
    added to array ``a`` besides speech, masking bursts included.
    """

    spec: SceneSpec
    recording_id: str
    reference: list  # speaker-labelled Segments, may overlap
    sources: np.ndarray  # (speakers, samples) dry signals
    rirs: list
    delays: np.ndarray  # (speakers, arrays, channels) direct-path delay in samples
    noise: list  # per array, (channels, samples)

    @property
    def speakers(self) -> list[str]:
        return [f"spk{k}" for k in range(len(self.sources))]

    @property
    def num_samples(self) -> int:
        return self.sources.shape[1]

    @property
    def num_frames(self) -> int:
        return int(round(self.num_samples / self.spec.sample_rate / FRAME_SHIFT_SEC))

    def activity(self) -> np.ndarray:
        """``frames x speakers`` boolean ground-truth activity."""
        act, _ = label_frames(self.reference, self.num_frames, self.speakers)
        return act

    def overlap_mask(self) -> np.ndarray:
        return self.activity().sum(axis=1) > 1

    def image(self, array: int, speaker: int, part: str = "full") -> np.ndarray:
        """Speaker image at every channel of ``array``, ``(channels, samples)``.

        ``part`` is ``"full"``, ``"early"`` (direct path plus the first 50 ms)
        or ``"late"`` (the remainder).
        """
        src = self.sources[speaker]
        out = []
        for c, rir_set in enumerate(self.rirs[array]):
            h = rir_set[speaker]
            if part != "full":
                split = int(self.delays[speaker, array, c] + EARLY_SPLIT_SEC * self.spec.sample_rate)
                h = h.copy()
                if part == "early":
                    h[split:] = 0.0
                elif part == "late":
                    h[:split] = 0.0
                else:
                    raise ValueError(f"unknown part {part!r}")
            out.append(signal.fftconvolve(src, h)[: self.num_samples])
        return np.array(out)

    def images(self, array: int, part: str = "full") -> np.ndarray:
        """``(speakers, channels, samples)``."""
        return np.stack([self.image(array, k, part) for k in range(len(self.sources))])


def _speaker_filter(rng, sample_rate):
    """All-pole resonator bank with four formant-like peaks."""
    ranges = [(300, 900), (900, 2400), (2200, 3400), (3400, 4800)]
    poles = []
    for lo, hi in ranges:
        f = rng.uniform(lo, hi)
        bw = rng.uniform(60, 200)
        r = np.exp(-np.pi * bw / sample_rate)
        poles += [r * np.exp(2j * np.pi * f / sample_rate), r * np.exp(-2j * np.pi * f / sample_rate)]
    a = np.real(np.poly(poles))
    tilt = rng.uniform(0.5, 0.95)
    return a, tilt


def _speech_like(rng, n, sample_rate, voice):
    """Syllable sequence: each syllable gets its own pitch contour, loudness
    and voicing mix, separated by short dips."""
    a, tilt, f0, voicing = voice
    excitation = np.zeros(n)
    env = np.zeros(n)
    pos = 0
    while pos < n:
        syl = int(rng.uniform(0.12, 0.3) * sample_rate)
        dip = int(rng.uniform(0.02, 0.08) * sample_rate)
        m = min(syl, n - pos)
        t = np.arange(m) / sample_rate
        f_start = f0 * rng.uniform(0.8, 1.25)
        f_track = f_start * (1 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-3))
        phase = np.cumsum(f_track) / sample_rate + rng.uniform()
        pulses = np.diff(np.floor(phase), prepend=np.floor(phase[0]))
        v = np.clip(voicing + rng.uniform(-0.3, 0.3), 0.0, 1.0)
        excitation[pos : pos + m] = v * pulses * 6.0 + (1 - v) * 0.3 * rng.normal(size=m)
        env[pos : pos + m] = np.sin(np.pi * (np.arange(m) + 0.5) / m) ** 0.7 * rng.uniform(0.5, 1.0)
        pos += m + dip
    excitation = signal.lfilter([1.0], [1.0, -tilt], excitation)
    x = signal.lfilter([1.0], a, excitation) * env
    return x / (np.sqrt(np.mean(x**2)) + 1e-12)


def _layout(durations, gaps, overlap_flags, overlap_fracs, scale, duration, lead):
    starts, ends = [], []
    t = lead
    for i, d in enumerate(durations):
        if i > 0:
            if overlap_flags[i]:
                cap = 0.45 * min(d, durations[i - 1])
                o = min(cap, scale * overlap_fracs[i] * min(d, durations[i - 1]))
                t = ends[-1] - o
            else:
                t = ends[-1] + gaps[i]
        if t >= duration - 0.3:
            break
        starts.append(t)
        ends.append(min(t + d, duration))
    return starts, ends


def _overlap_fraction(starts, ends, speakers_seq, num_speakers, duration):
    n = int(round(duration / FRAME_SHIFT_SEC))
    count = np.zeros(n, dtype=np.int16)
    for s, e in zip(starts, ends):
        count[int(round(s / FRAME_SHIFT_SEC)) : int(round(e / FRAME_SHIFT_SEC))] += 1
    speech = np.count_nonzero(count)
    return np.count_nonzero(count > 1) / speech if speech else 0.0


def _schedule(spec: SceneSpec, rng):
    n_turns = int(spec.duration_sec / spec.min_turn_sec) + 4
    durations = rng.uniform(spec.min_turn_sec, spec.max_turn_sec, n_turns)
    gaps = rng.exponential(spec.mean_gap_sec, n_turns) + 0.1
    speakers = [int(rng.integers(spec.num_speakers))]
    for _ in range(n_turns - 1):
        if spec.num_speakers == 1:
            speakers.append(0)
        else:
            choices = [k for k in range(spec.num_speakers) if k != speakers[-1]]
            speakers.append(int(rng.choice(choices)))
    p_overlap = min(1.0, 3.0 * spec.overlap_ratio)
    flags = rng.random(n_turns) < p_overlap
    flags[0] = False
    fracs = rng.uniform(0.3, 1.0, n_turns)
    lead = rng.uniform(0.3, 1.0)

    scale = 0.0
    if spec.overlap_ratio > 0 and flags.any():
        lo, hi = 0.0, 2.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            st, en = _layout(durations, gaps, flags, fracs, mid, spec.duration_sec, lead)
            if _overlap_fraction(st, en, speakers, spec.num_speakers, spec.duration_sec) < spec.overlap_ratio:
                lo = mid
            else:
                hi = mid
        scale = 0.5 * (lo + hi)
    starts, ends = _layout(durations, gaps, flags, fracs, scale, spec.duration_sec, lead)
    return [(speakers[i], starts[i], ends[i]) for i in range(len(starts))]


def _rir(rng, delay, gain, t60, sample_rate):
    if t60 <= 0:
        h = np.zeros(delay + 1)
        h[delay] = gain
        return h
    length = int(1.2 * t60 * sample_rate)
    h = np.zeros(delay + length)
    h[delay] = gain
    t = np.arange(1, length) / sample_rate
    tail = rng.normal(size=length - 1) * np.exp(-6.9 * t / t60)
    # sparse onset of the tail (first reflections arrive after ~2 ms)
    tail[: int(0.002 * sample_rate)] = 0.0
    tail *= gain * np.sqrt(1.5 / np.sum(tail**2))  # tail carries 1.5x direct energy
    h[delay + 1 :] = tail
    return h


def simulate_scene(spec: SceneSpec):
    """Return ``(per-array MultichannelAudio list, SceneTruth)`` for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    n = int(round(spec.duration_sec * sr))

    voices = []
    for _ in range(spec.num_speakers):
        a, tilt = _speaker_filter(rng, sr)
        voices.append((a, tilt, rng.uniform(90, 240), rng.uniform(0.4, 0.8)))
    levels = 10 ** (rng.uniform(-2, 2, spec.num_speakers) / 20)

    turns = _schedule(spec, rng)
    sources = np.zeros((spec.num_speakers, n))
    reference = []
    for k, start, end in turns:
        a = int(round(start * sr))
        b = min(n, int(round(end * sr)))
        if b - a < int(0.05 * sr):
            continue
        sources[k, a:b] += levels[k] * 0.04 * _speech_like(rng, b - a, sr, voices[k])
        reference.append(Segment(round(a / sr, 4), round((b - a) / sr, 4), f"spk{k}"))
    reference = sort_segments(reference)

    spans = []
    for k, start, end in turns:
        a, b = int(round(start * sr)), min(n, int(round(end * sr)))
        if b - a >= int(0.05 * sr):
            spans.append((a, b))

    delays = np.zeros((spec.num_speakers, spec.num_arrays, spec.channels_per_array), dtype=int)
    rirs = []
    for arr in range(spec.num_arrays):
        array_rirs = [[] for _ in range(spec.channels_per_array)]
        for k in range(spec.num_speakers):
            base = int(rng.integers(0, spec.max_array_delay + 1)) + spec.max_mic_delay
            gain = rng.uniform(0.5, 1.0)
            for c in range(spec.channels_per_array):
                offset = 0 if c == 0 else int(rng.integers(-spec.max_mic_delay, spec.max_mic_delay + 1))
                delays[k, arr, c] = base + offset
                array_rirs[c].append(_rir(rng, base + offset, gain, spec.reverb_t60_sec, sr))
        rirs.append(array_rirs)

    truth = SceneTruth(
        spec=spec,
        recording_id=f"scene{spec.seed}",
        reference=reference,
        sources=sources,
        rirs=rirs,
        delays=delays,
        noise=[],
    )

    speech_frames = truth.activity().any(axis=1)
    speech_samples = np.repeat(speech_frames, int(round(FRAME_SHIFT_SEC * sr)))[:n]
    if speech_samples.size < n:
        speech_samples = np.pad(speech_samples, (0, n - speech_samples.size))
    audios = []
    for arr in range(spec.num_arrays):
        clean = truth.images(arr).sum(axis=0)
        active = clean[:, speech_samples] if speech_samples.any() else clean
        power = np.mean(active**2) if active.size else 0.0
        noise_std = np.sqrt(max(power, 1e-12) / 10 ** (spec.snr_db / 10))
        noise = rng.normal(scale=noise_std, size=clean.shape)
        if spec.masking_snr_db is not None and spec.num_arrays > 1:
            mask_std = np.sqrt(max(power, 1e-12) / 10 ** (spec.masking_snr_db / 10))
            for a, b in spans[arr :: spec.num_arrays]:
                noise[:, a:b] += rng.normal(scale=mask_std, size=(clean.shape[0], b - a))
        truth.noise.append(noise)
        audios.append(MultichannelAudio(clean + noise, sr))
    return audios, truth
