"""RTTM I/O and frame-based DER/JER scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .segments import Segment

SCORE_FRAME_SEC = 0.01


@dataclass(frozen=True, order=True)
class RttmRecord:
    recording_id: str
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if not self.speaker:
            raise ValueError("speaker label must be non-empty")
        if not math.isfinite(self.onset) or not self.duration > 0:
            raise ValueError(f"bad timing onset={self.onset} duration={self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class Rttm:
    records: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def recordings(self) -> list[str]:
        return sorted({r.recording_id for r in self.records})

    def for_recording(self, recording_id: str) -> list[RttmRecord]:
        return [r for r in self.records if r.recording_id == recording_id]

    @classmethod
    def from_segments(cls, recording_id: str, segments) -> "Rttm":
        return cls(RttmRecord(recording_id, s.onset, s.duration, s.label) for s in segments)

    def segments(self, recording_id: str | None = None) -> list[Segment]:
        recs = self.records if recording_id is None else self.for_recording(recording_id)
        return sorted(Segment(max(0.0, r.onset), r.duration, r.speaker) for r in recs)


def parse_rttm(text: str) -> Rttm:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 10:
            raise ValueError(f"line {lineno}: expected 10 fields, got {len(fields)}")
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric time") from None
        try:
            records.append(RttmRecord(fields[1], onset, duration, fields[7]))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return Rttm(records)


def read_rttm(path) -> Rttm:
    with open(path) as fh:
        return parse_rttm(fh.read())


def emit_rttm(rttm: Rttm) -> str:
    return "".join(
        f"SPEAKER {r.recording_id} 1 {r.onset:.2f} {r.duration:.2f} <NA> <NA> {r.speaker} <NA> <NA>\n"
        for r in rttm
    )


def write_rttm(path, rttm: Rttm) -> None:
    with open(path, "w") as fh:
        fh.write(emit_rttm(rttm))


# --------------------------------------------------------------------------
# Scoring


@dataclass(frozen=True)
class DiarScore:
    missed_speech: float
    false_alarm: float
    speaker_error: float
    der: float
    jer: float
    mapping: dict = field(default_factory=dict)  # recording -> {ref: hyp}
    scored_speech_sec: float = 0.0


def _frame(t: float) -> int:
    return int(round(t / SCORE_FRAME_SEC))


def speaker_matrix(records, num_frames: int):
    """``frames x speakers`` activity with speakers in lexicographic order."""
    labels = sorted({r.speaker for r in records})
    index = {s: i for i, s in enumerate(labels)}
    act = np.zeros((num_frames, len(labels)), dtype=bool)
    for r in records:
        act[max(0, _frame(r.onset)) : max(0, _frame(r.end)), index[r.speaker]] = True
    return act, labels


def scoring_mask(ref_records, num_frames: int, collar_sec: float, score_overlap: bool, ref_act) -> np.ndarray:
    mask = np.ones(num_frames, dtype=bool)
    c = _frame(collar_sec)
    if c > 0:
        for r in ref_records:
            for b in (_frame(r.onset), _frame(r.end)):
                mask[max(0, b - c) : max(0, b + c)] = False
    if not score_overlap:
        mask &= ref_act.sum(axis=1) <= 1
    return mask


def frame_errors(ref_act, hyp_act, mapping_pairs):
    """(missed, false alarm, confusion, ref total) frame counts for a mapping."""
    n_ref = ref_act.sum(axis=1)
    n_hyp = hyp_act.sum(axis=1)
    correct = np.zeros(len(ref_act), dtype=int)
    for r, h in mapping_pairs:
        correct += ref_act[:, r] & hyp_act[:, h]
    missed = np.maximum(n_ref - n_hyp, 0).sum()
    fa = np.maximum(n_hyp - n_ref, 0).sum()
    conf = (np.minimum(n_ref, n_hyp) - correct).sum()
    return int(missed), int(fa), int(conf), int(n_ref.sum())


def _optimal_mapping(ref_act, hyp_act):
    if ref_act.shape[1] == 0 or hyp_act.shape[1] == 0:
        return []
    overlap = ref_act.astype(np.int64).T @ hyp_act.astype(np.int64)
    rows, cols = linear_sum_assignment(-overlap)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if overlap[r, c] > 0]


def compute_der(ref: Rttm, hyp: Rttm, collar_sec: float = 0.0, score_overlap: bool = True) -> DiarScore:
    unknown = set(hyp.recordings) - set(ref.recordings)
    if unknown:
        raise ValueError(f"hypothesis has recordings missing from the reference: {sorted(unknown)}")
    totals = np.zeros(4, dtype=np.int64)
    mapping = {}
    jer_terms = []
    for rec in ref.recordings:
        ref_recs, hyp_recs = ref.for_recording(rec), hyp.for_recording(rec)
        end = max([r.end for r in ref_recs + hyp_recs])
        num = _frame(end) + 1
        ref_act, ref_labels = speaker_matrix(ref_recs, num)
        hyp_act, hyp_labels = speaker_matrix(hyp_recs, num)
        mask = scoring_mask(ref_recs, num, collar_sec, score_overlap, ref_act)
        pairs = _optimal_mapping(ref_act[mask], hyp_act[mask])
        totals += frame_errors(ref_act[mask], hyp_act[mask], pairs)
        mapping[rec] = {ref_labels[r]: hyp_labels[h] for r, h in pairs}

        # JER uses the full timeline of each mapped pair
        mapped = dict(pairs)
        for r in range(len(ref_labels)):
            if r not in mapped:
                jer_terms.append(1.0)
                continue
            a, b = ref_act[:, r], hyp_act[:, mapped[r]]
            jer_terms.append(1.0 - (a & b).sum() / (a | b).sum())
    missed, fa, conf, total = totals
    denom = max(int(total), 1)
    ms, fa_r, se = missed / denom, fa / denom, conf / denom
    return DiarScore(
        missed_speech=ms,
        false_alarm=fa_r,
        speaker_error=se,
        der=ms + fa_r + se,
        jer=float(np.mean(jer_terms)) if jer_terms else 0.0,
        mapping=mapping,
        scored_speech_sec=total * SCORE_FRAME_SEC,
    )


def compute_jer(ref: Rttm, hyp: Rttm) -> float:
    return compute_der(ref, hyp, collar_sec=0.0, score_overlap=True).jer


def format_score(score: DiarScore) -> str:
    return (
        f"DER {100 * score.der:.2f} MS {100 * score.missed_speech:.2f} "
        f"FA {100 * score.false_alarm:.2f} SE {100 * score.speaker_error:.2f} JER {100 * score.jer:.2f}"
    )
