"""Audio containers, WAV I/O, STFT/iSTFT and log-mel features."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MEL_FLOOR = 1e-10

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for WAV decoding problems."""


class UnsupportedWavError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


@dataclass(frozen=True)
class MultichannelAudio:
    """Sample-domain signal, ``channels x num_samples``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D (channels x samples), got {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> "MultichannelAudio":
        return MultichannelAudio(self.samples[index : index + 1], self.sample_rate)


@dataclass(frozen=True)
class Spectrogram:
    """Complex one-sided STFT, ``channels x frames x freqs``.

    ``num_samples`` records the length of the analysed signal so that
    :func:`istft` can return exactly that many samples.
    """

    bins: np.ndarray
    frame_shift: int
    fft_size: int
    sample_rate: int
    num_samples: int | None = None

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 3:
            raise ValueError(f"bins must be 3-D (channels x frames x freqs), got {bins.shape}")
        if bins.shape[2] != self.fft_size // 2 + 1:
            raise ValueError(
                f"expected {self.fft_size // 2 + 1} frequency bins for fft_size {self.fft_size}, "
                f"got {bins.shape[2]}"
            )
        if not np.all(np.isfinite(bins)):
            raise ValueError("spectrogram entries must be finite")
        object.__setattr__(self, "bins", bins)

    @property
    def num_channels(self) -> int:
        return self.bins.shape[0]

    @property
    def num_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def num_freqs(self) -> int:
        return self.bins.shape[2]

    def with_bins(self, bins: np.ndarray) -> "Spectrogram":
        return Spectrogram(bins, self.frame_shift, self.fft_size, self.sample_rate, self.num_samples)


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray
    frame_shift_sec: float

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError(f"rows must be 2-D (frames x dims), got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("feature entries must be finite")
        object.__setattr__(self, "rows", rows)

    @property
    def num_frames(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


# --------------------------------------------------------------------------
# WAV I/O


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack("<4sI", data[pos : pos + 8])
        yield chunk_id, pos + 8, size
        pos += 8 + size + (size & 1)


def read_wav(path) -> MultichannelAudio:
    """Read a PCM16 or float32 WAV file into ``[-1, 1]`` scaled samples.

    Raises:
        FileNotFoundError: the file does not exist.
        UnsupportedWavError: not RIFF/WAVE, or an encoding other than
            16-bit PCM / 32-bit float.
        TruncatedWavError: the data chunk is shorter than its header says.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise UnsupportedWavError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    for chunk_id, start, size in _iter_chunks(data):
        if chunk_id == b"fmt ":
            if size < 16 or start + 16 > len(data):
                raise TruncatedWavError(f"{path}: fmt chunk truncated")
            fmt = struct.unpack("<HHIIHH", data[start : start + 16])
            if fmt[0] == _FORMAT_EXTENSIBLE and size >= 40 and start + 26 <= len(data):
                sub_format = struct.unpack("<H", data[start + 24 : start + 26])[0]
                fmt = (sub_format,) + fmt[1:]
        elif chunk_id == b"data":
            if fmt is None:
                raise UnsupportedWavError(f"{path}: data chunk before fmt chunk")
            end = start + size
            if end > len(data):
                raise TruncatedWavError(
                    f"{path}: data chunk declares {size} bytes, only {len(data) - start} present"
                )
            payload = data[start:end]
            break
    if fmt is None:
        raise UnsupportedWavError(f"{path}: missing fmt chunk")
    if payload is None:
        raise TruncatedWavError(f"{path}: missing data chunk")

    format_tag, channels, sample_rate, _, block_align, bits = fmt
    if format_tag == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif format_tag == _FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedWavError(f"{path}: unsupported encoding (format {format_tag}, {bits} bits)")
    if channels < 1:
        raise UnsupportedWavError(f"{path}: invalid channel count {channels}")
    if len(payload) % (channels * dtype.itemsize):
        raise TruncatedWavError(f"{path}: payload is not a whole number of frames")

    frames = np.frombuffer(payload, dtype=dtype).astype(np.float64) * scale
    samples = frames.reshape(-1, channels).T
    return MultichannelAudio(np.clip(samples, -1.0, 1.0), sample_rate)


def write_wav(path, audio: MultichannelAudio) -> None:
    """Write 16-bit PCM, saturating samples outside ``[-1, 1]``."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    try:
        fh = open(path, "wb")
    except OSError as err:
        raise OSError(f"cannot write WAV file {path}: {err}") from err
    with fh, wave.open(fh, "wb") as f:
        f.setnchannels(audio.num_channels)
        f.setsampwidth(2)
        f.setframerate(audio.sample_rate)
        f.writeframes(pcm.T.tobytes())


# --------------------------------------------------------------------------
# STFT


def get_window(window, size: int) -> np.ndarray:
    """Periodic analysis windows by name, or pass an explicit array through."""
    if not isinstance(window, str):
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (size,):
            raise ValueError(f"window must have length {size}")
        return window
    n = np.arange(size)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / size)
    if window == "sqrt_hann":
        return np.sqrt(hann)
    if window == "hann":
        return hann
    if window in ("rect", "boxcar"):
        return np.ones(size)
    raise ValueError(f"unknown window {window!r}")


def _check_stft_params(fft_size: int, frame_shift: int):
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < frame_shift <= fft_size:
        raise ValueError(f"frame_shift must be in (0, fft_size], got {frame_shift}")


def stft(
    audio: MultichannelAudio,
    fft_size: int = 1024,
    frame_shift: int = 256,
    window="sqrt_hann",
) -> Spectrogram:
    """One-sided STFT of every channel.

    The signal is preceded by ``fft_size - frame_shift`` zeros, so every input
    sample is covered by the same number of frames, and the tail is
    zero-padded to a whole frame. On the padded length ``L`` the frame count is
    ``floor((L - fft_size) / frame_shift) + 1``.
    """
    _check_stft_params(fft_size, frame_shift)
    if audio.num_samples == 0:
        raise ValueError("cannot take the STFT of empty audio")
    win = get_window(window, fft_size)
    lead = fft_size - frame_shift
    total = lead + audio.num_samples
    num_frames = max(0, -(-(total - fft_size) // frame_shift)) + 1
    padded_len = (num_frames - 1) * frame_shift + fft_size
    x = np.zeros((audio.num_channels, padded_len))
    x[:, lead : lead + audio.num_samples] = audio.samples
    frames = np.lib.stride_tricks.sliding_window_view(x, fft_size, axis=-1)[:, ::frame_shift]
    bins = np.fft.rfft(frames * win, axis=-1)
    return Spectrogram(bins, frame_shift, fft_size, audio.sample_rate, audio.num_samples)


def istft(spec: Spectrogram, window="sqrt_hann") -> MultichannelAudio:
    """Weighted overlap-add inverse of :func:`stft`."""
    if spec.num_frames == 0:
        raise ValueError("cannot invert a spectrogram with zero frames")
    fft_size, shift = spec.fft_size, spec.frame_shift
    _check_stft_params(fft_size, shift)
    win = get_window(window, fft_size)
    frames = np.fft.irfft(spec.bins, n=fft_size, axis=-1) * win
    padded_len = (spec.num_frames - 1) * shift + fft_size
    out = np.zeros((spec.num_channels, padded_len))
    norm = np.zeros(padded_len)
    for t in range(spec.num_frames):
        out[:, t * shift : t * shift + fft_size] += frames[:, t]
        norm[t * shift : t * shift + fft_size] += win * win
    out /= np.maximum(norm, 1e-10)
    lead = fft_size - shift
    num_samples = spec.num_samples if spec.num_samples is not None else padded_len - lead
    return MultichannelAudio(out[:, lead : lead + num_samples], spec.sample_rate)


# --------------------------------------------------------------------------
# log-mel


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_mels: int, fft_size: int, sample_rate: int, fmin=0.0, fmax=None) -> np.ndarray:
    """Triangular HTK-style filters, shape ``num_mels x (fft_size // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_power_spectrum(x: np.ndarray, fft_size: int, frame_shift: int, window="hann") -> np.ndarray:
    """Power spectra of a 1-D signal on a grid where frame ``t`` is centred on
    ``[t * frame_shift, (t + 1) * frame_shift)``; ``len(x) // frame_shift`` frames."""
    num_frames = len(x) // frame_shift
    if num_frames == 0:
        return np.zeros((0, fft_size // 2 + 1))
    left = (fft_size - frame_shift) // 2
    padded = np.zeros(left + num_frames * frame_shift + fft_size)
    padded[left : left + len(x)] = x[: len(padded) - left]
    frames = np.lib.stride_tricks.sliding_window_view(padded, fft_size)[::frame_shift][:num_frames]
    return np.abs(np.fft.rfft(frames * get_window(window, fft_size), axis=-1)) ** 2


def logmel(
    audio: MultichannelAudio,
    num_mels: int = 40,
    fft_size: int = 512,
    frame_shift: int = 160,
) -> FeatureMatrix:
    """Natural-log mel energies of a single-channel signal, floored at 1e-10."""
    if num_mels < 1:
        raise ValueError(f"num_mels must be >= 1, got {num_mels}")
    if audio.num_channels != 1:
        raise ValueError(f"logmel expects a single channel, got {audio.num_channels}")
    _check_stft_params(fft_size, frame_shift)
    power = frame_power_spectrum(audio.samples[0], fft_size, frame_shift)
    fb = mel_filterbank(num_mels, fft_size, audio.sample_rate)
    mel = power @ fb.T
    return FeatureMatrix(np.log(np.maximum(mel, MEL_FLOOR)), frame_shift / audio.sample_rate)
