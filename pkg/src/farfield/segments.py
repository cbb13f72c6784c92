"""Time segments shared by SAD, diarization, resegmentation and GSS."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FRAME_SHIFT_SEC = 0.01


@dataclass(frozen=True, order=True)
class Segment:
    onset: float
    duration: float
    label: str = "speech"

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"segment onset must be >= 0, got {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"segment duration must be > 0, got {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


SegmentList = list  # list[Segment], sorted by onset


def sort_segments(segments) -> list[Segment]:
    return sorted(segments, key=lambda s: (s.onset, s.label, s.duration))


def labels_of(segments) -> list[str]:
    return sorted({s.label for s in segments})


def sec_to_frame(t: float, frame_shift: float = FRAME_SHIFT_SEC) -> int:
    return int(round(t / frame_shift))


def frames_to_segments(active: np.ndarray, frame_shift: float = FRAME_SHIFT_SEC, label="speech"):
    """Runs of true values in a boolean frame vector → segments."""
    active = np.asarray(active, dtype=bool)
    if active.size == 0:
        return []
    padded = np.concatenate([[False], active, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    starts, ends = edges[::2], edges[1::2]
    return [Segment(s * frame_shift, (e - s) * frame_shift, label) for s, e in zip(starts, ends)]


def segments_to_frames(segments, num_frames: int, frame_shift: float = FRAME_SHIFT_SEC, label=None):
    """Boolean activity on the frame grid for segments (optionally one label)."""
    active = np.zeros(num_frames, dtype=bool)
    for seg in segments:
        if label is not None and seg.label != label:
            continue
        a = min(num_frames, max(0, sec_to_frame(seg.onset, frame_shift)))
        b = min(num_frames, max(0, sec_to_frame(seg.end, frame_shift)))
        active[a:b] = True
    return active


def label_frames(segments, num_frames: int, labels=None, frame_shift: float = FRAME_SHIFT_SEC):
    """``frames x speakers`` boolean activity matrix, columns in ``labels`` order."""
    labels = labels_of(segments) if labels is None else list(labels)
    out = np.zeros((num_frames, len(labels)), dtype=bool)
    for k, label in enumerate(labels):
        out[:, k] = segments_to_frames(segments, num_frames, frame_shift, label)
    return out, labels


def merge_segments(segments, frame_shift: float = FRAME_SHIFT_SEC):
    """Union of all segments regardless of label, as 'speech' segments."""
    if not segments:
        return []
    end = max(s.end for s in segments)
    n = sec_to_frame(end, frame_shift) + 1
    return frames_to_segments(segments_to_frames(segments, n, frame_shift), frame_shift)


def write_segments(path, segments) -> None:
    """``onset duration label`` per line, two-decimal fixed point."""
    lines = [f"{s.onset:.2f} {s.duration:.2f} {s.label}\n" for s in sort_segments(segments)]
    Path(path).write_text("".join(lines))


def read_segments(path) -> list[Segment]:
    segments = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 'onset duration [label]'")
        try:
            onset, duration = float(fields[0]), float(fields[1])
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: non-numeric time") from err
        segments.append(Segment(onset, duration, fields[2] if len(fields) == 3 else "speech"))
    return sort_segments(segments)
