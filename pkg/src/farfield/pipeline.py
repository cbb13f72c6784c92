"""End-to-end orchestration: WPE → beamform → SAD → first pass →
resegmentation → GSS, with hash-keyed caching of every stage output."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import FeatureMatrix, MultichannelAudio, read_wav, write_wav
from .beamform import beamform
from .diarize import embedding_features, first_pass, load_plda, save_plda, train_simulated_plda
from .gss import GssConfig, GssEnhancer
from .metrics import Rttm, compute_der, format_score, read_rttm, write_rttm
from .reseg import (
    OverlapMask,
    VbConfig,
    assign_speakers,
    filter_short,
    heuristic_overlap,
    init_q,
    oracle_overlap,
    overlap_from_spans,
    read_overlap_spans,
    vb_resegment,
)
from .sad import FramePosteriors, SadHmmConfig, fuse_posteriors, reference_posteriors, sad_features, viterbi_smooth
from .segments import FRAME_SHIFT_SEC, Segment, merge_segments, write_segments
from .wpe import WpeConfig, wpe_process

CACHE_ENV = "FARFIELD_CACHE"

DEFAULTS = {
    "pipeline.mode": "track2",
    "pipeline.recording": "",
    "wpe.enabled": True,
    "wpe.taps": 10,
    "wpe.delay": 3,
    "wpe.alpha": 0.9999,
    "beamform.block_len": 0.5,
    "beamform.max_delay": 0.03,
    "beamform.threshold": 0.1,
    "sad.oracle": False,
    "sad.fusion": "max",
    "sad.min_speech": 0.3,
    "sad.min_silence": 0.3,
    "sad.max_speech": 20.0,
    "sad.speech_prior": 0.5,
    "diarize.oracle": False,
    "diarize.fusion": "max",
    "diarize.num_speakers": 4,
    "diarize.window": 1.5,
    "diarize.stride": 0.25,
    "diarize.plda": "",
    "diarize.plda_scenes": 12,
    "diarize.plda_seed": 1000,
    "reseg.enabled": True,
    "reseg.overlap": "heuristic",
    "reseg.loop_prob": 0.99,
    "reseg.downsample": 25,
    "reseg.subspace_dim": 16,
    "reseg.acoustic_scale": 0.1,
    "reseg.iterations": 1,
    "reseg.min_duration": 0.2,
    "gss.enabled": True,
    "gss.context": 20.0,
    "gss.iterations": 20,
    "score.collar": 0.0,
    "score.overlap": True,
}

CHOICES = {
    "pipeline.mode": ("track1", "track2"),
    "sad.fusion": ("max", "mean"),
    "diarize.fusion": ("max", "mean"),
    "reseg.overlap": ("heuristic", "oracle", "none"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass(frozen=True)
class PipelineConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        merged = dict(DEFAULTS)
        for key, value in self.values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = _coerce(key, value) if isinstance(value, str) and not isinstance(DEFAULTS[key], str) else value
        for key, allowed in CHOICES.items():
            if merged[key] not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}, got {merged[key]!r}")
        object.__setattr__(self, "values", merged)

    def __getitem__(self, key):
        return self.values[key]

    def stage(self, name: str) -> dict:
        prefix = name + "."
        return {k: v for k, v in sorted(self.values.items()) if k.startswith(prefix)}

    def updated(self, values: dict) -> "PipelineConfig":
        return PipelineConfig({**self.values, **values})


def parse_config(text: str) -> PipelineConfig:
    """``stage.param = value`` per line; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'stage.param = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return PipelineConfig(values)


def read_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def emit_config(config: PipelineConfig) -> str:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(config.values.items()))


# --------------------------------------------------------------------------
# Cache


def _digest(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:24]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:24]


class StageCache:
    """Stage outputs on disk, keyed by the hash of (stage, params, input keys)."""

    def __init__(self, root):
        self.root = Path(root)
        self.hits: list[str] = []
        self.misses: list[str] = []

    @staticmethod
    def key(stage: str, params: dict, *inputs: str) -> str:
        return f"{stage}-{_digest(stage, params, inputs)}"

    def _path(self, key: str, suffix: str) -> Path:
        return self.root / f"{key}{suffix}"

    def audio(self, key: str, compute):
        path = self._path(key, ".npz")
        if path.exists():
            self.hits.append(key)
            with np.load(path) as data:
                sr = int(data["sample_rate"])
                return [MultichannelAudio(data[f"a{i}"], sr) for i in range(int(data["count"]))]
        self.misses.append(key)
        audios = compute()
        self.root.mkdir(parents=True, exist_ok=True)
        arrays = {f"a{i}": a.samples for i, a in enumerate(audios)}
        np.savez(path, count=len(audios), sample_rate=audios[0].sample_rate if audios else 0, **arrays)
        return audios

    def segments(self, key: str, compute):
        path = self._path(key, ".json")
        if path.exists():
            self.hits.append(key)
            return [Segment(*row) for row in json.loads(path.read_text())]
        self.misses.append(key)
        segs = compute()
        self.root.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps([[s.onset, s.duration, s.label] for s in segs]))
        return segs


def default_cache_dir(outdir) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(outdir) / "cache"


# --------------------------------------------------------------------------
# Stages


def _num_frames(audio: MultichannelAudio) -> int:
    return int(round(audio.duration / FRAME_SHIFT_SEC))


def _fit_rows(rows: np.ndarray, n: int) -> np.ndarray:
    if len(rows) >= n:
        return rows[:n]
    return np.vstack([rows, np.repeat(rows[-1:], n - len(rows), axis=0)])


def sad_posteriors(audios, fusion: str) -> tuple[FramePosteriors, np.ndarray]:
    """Fused speech posteriors and the array-averaged spectral flatness."""
    feats = [sad_features(a) for a in audios]
    n = min(f.num_frames for f in feats)
    posts = [reference_posteriors(FeatureMatrix(f.rows[:n], f.frame_shift_sec)) for f in feats]
    flatness = np.mean([f.rows[:n, 1] for f in feats], axis=0)
    return fuse_posteriors(posts, fusion), flatness


def reseg_features(audios, num_frames: int) -> FeatureMatrix:
    """Per-array log-mel, mean-normalized, then averaged across arrays."""
    rows = [embedding_features(a).rows for a in audios]
    n = min(len(r) for r in rows)
    avg = np.mean([r[:n] - r[:n].mean(axis=0) for r in rows], axis=0)
    return FeatureMatrix(_fit_rows(avg, num_frames), FRAME_SHIFT_SEC)


def resegment(audios, first, speech, overlap: OverlapMask, config: PipelineConfig) -> list[Segment]:
    labels = sorted({s.label for s in first})
    if not labels:
        return []
    n = overlap.num_frames
    q0 = init_q(first, n, labels)
    if not q0.speech.any():
        return []
    vb = VbConfig(config["reseg.subspace_dim"], config["reseg.loop_prob"], config["reseg.downsample"],
                  config["reseg.iterations"], config["reseg.acoustic_scale"])
    q = vb_resegment(reseg_features(audios, n), q0, vb)
    return filter_short(assign_speakers(q, overlap, speech), config["reseg.min_duration"])


@dataclass
class PipelineInputs:
    arrays: list  # one WAV path per array
    reference: str | None = None  # oracle RTTM
    overlap: str | None = None  # oracle overlap spans


@dataclass
class PipelineResult:
    recording_id: str
    segments: list
    rttm_path: Path
    enhanced: list = field(default_factory=list)
    score: object = None
    cache_hits: list = field(default_factory=list)
    cache_misses: list = field(default_factory=list)


def _plda(config: PipelineConfig, cache_root: Path):
    if config["diarize.plda"]:
        return load_plda(config["diarize.plda"])
    key = StageCache.key("plda", {"scenes": config["diarize.plda_scenes"], "seed": config["diarize.plda_seed"]})
    path = cache_root / f"{key}.plda"
    if path.exists():
        return load_plda(path)
    model = train_simulated_plda(config["diarize.plda_scenes"], config["diarize.plda_seed"])
    cache_root.mkdir(parents=True, exist_ok=True)
    save_plda(path, model)
    return model


def run_pipeline(config: PipelineConfig, inputs: PipelineInputs, outdir, cache_dir=None) -> PipelineResult:
    if not inputs.arrays:
        raise ValueError("at least one array WAV is required")
    mode = config["pipeline.mode"]
    needs_ref = mode == "track1" or config["sad.oracle"] or config["diarize.oracle"] or (
        mode == "track2" and config["reseg.enabled"] and config["reseg.overlap"] == "oracle" and not inputs.overlap)
    if needs_ref and not inputs.reference:
        raise ValueError("this configuration needs an oracle RTTM (--ref)")

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cache = StageCache(cache_dir or default_cache_dir(outdir))
    ref_rttm = read_rttm(inputs.reference) if inputs.reference else None
    rec = config["pipeline.recording"]
    if not rec:
        single = ref_rttm is not None and len(ref_rttm.recordings) == 1
        rec = ref_rttm.recordings[0] if single else Path(inputs.arrays[0]).stem
    raw_key = _digest([file_digest(p) for p in inputs.arrays])
    ref_key = file_digest(inputs.reference) if inputs.reference else ""
    reference = None
    if ref_rttm is not None:
        if rec not in ref_rttm.recordings:
            raise ValueError(f"recording {rec!r} not found in {inputs.reference}")
        reference = ref_rttm.segments(rec)

    def load_raw():
        audios = [read_wav(p) for p in inputs.arrays]
        if len({a.sample_rate for a in audios}) != 1:
            raise ValueError("arrays must share a sample rate")
        return audios

    wpe_params = config.stage("wpe")
    wpe_key = StageCache.key("wpe", wpe_params, raw_key)

    def run_wpe():
        audios = load_raw()
        if not config["wpe.enabled"]:
            return audios
        wcfg = WpeConfig(taps=config["wpe.taps"], delay=config["wpe.delay"], alpha=config["wpe.alpha"])
        return [wpe_process(a, wcfg) for a in audios]

    dereverbed = cache.audio(wpe_key, run_wpe)

    if mode == "track1":
        segments = reference
        seg_key = ref_key
    else:
        bf_key = StageCache.key("beamform", config.stage("beamform"), wpe_key)
        mono = cache.audio(bf_key, lambda: [
            beamform(a, config["beamform.block_len"], config["beamform.max_delay"], config["beamform.threshold"])
            for a in dereverbed
        ])
        sad_key = StageCache.key("sad", config.stage("sad"), bf_key, ref_key if config["sad.oracle"] else "")

        def run_sad():
            if config["sad.oracle"]:
                return merge_segments(reference)
            post, _ = sad_posteriors(mono, config["sad.fusion"])
            hmm = SadHmmConfig(config["sad.min_speech"], config["sad.min_silence"], config["sad.max_speech"],
                               config["sad.speech_prior"])
            return viterbi_smooth(post, hmm)

        speech = cache.segments(sad_key, run_sad)
        write_segments(outdir / "sad.txt", speech)

        diar_params = config.stage("diarize")
        diar_key = StageCache.key("diarize", diar_params, bf_key, sad_key, ref_key if config["diarize.oracle"] else "")

        def run_diarize():
            if config["diarize.oracle"]:
                return sorted(reference)
            if not speech:
                return []
            plda = _plda(config, cache.root)
            segs, _, _ = first_pass(mono, speech, plda, num_speakers=config["diarize.num_speakers"],
                                    fusion=config["diarize.fusion"], window_sec=config["diarize.window"],
                                    stride_sec=config["diarize.stride"])
            return segs

        first = cache.segments(diar_key, run_diarize)
        write_rttm(outdir / "first_pass.rttm", Rttm.from_segments(rec, first))
        segments, seg_key = first, diar_key

        if config["reseg.enabled"]:
            overlap_src = config["reseg.overlap"]
            ov_key = ""
            if overlap_src == "oracle":
                ov_key = file_digest(inputs.overlap) if inputs.overlap else ref_key
            reseg_key = StageCache.key("reseg", config.stage("reseg"), diar_key, bf_key, sad_key, ov_key)

            def run_reseg():
                n = _num_frames(mono[0])
                if overlap_src == "oracle":
                    mask = (overlap_from_spans(read_overlap_spans(inputs.overlap), n) if inputs.overlap
                            else oracle_overlap(reference, n))
                elif overlap_src == "heuristic":
                    post, flat = sad_posteriors(mono, config["sad.fusion"])
                    mask = heuristic_overlap(_fit_rows(post.speech[:, None], n)[:, 0], _fit_rows(flat[:, None], n)[:, 0])
                else:
                    mask = OverlapMask(np.zeros(n, dtype=bool))
                return resegment(mono, first, speech, mask, config)

            segments = cache.segments(reseg_key, run_reseg)
            seg_key = reseg_key

    rttm_path = outdir / f"{rec}.rttm"
    write_rttm(rttm_path, Rttm.from_segments(rec, segments))

    enhanced = []
    if config["gss.enabled"] and segments:
        gss_cfg = GssConfig(context_sec=config["gss.context"], iterations=config["gss.iterations"])
        gss_key = StageCache.key("gss", config.stage("gss"), wpe_key, seg_key)
        order = sorted(segments)
        enhancer = None

        def run_gss():
            nonlocal enhancer
            enhancer = GssEnhancer(dereverbed, order, gss_cfg)
            return [enhancer.enhance(seg).audio for seg in order]

        outputs = cache.audio(gss_key, run_gss)
        wav_dir = outdir / "enhanced"
        wav_dir.mkdir(exist_ok=True)
        for seg, audio in zip(order, outputs):
            path = wav_dir / f"{seg.label}-{int(round(seg.onset * 1000))}-{int(round(seg.end * 1000))}.wav"
            write_wav(path, audio)
            enhanced.append(path)

    score = None
    if reference is not None and mode == "track2":
        score = compute_der(Rttm.from_segments(rec, reference), Rttm.from_segments(rec, segments),
                            collar_sec=config["score.collar"], score_overlap=config["score.overlap"])
        (outdir / "scores.txt").write_text(format_score(score) + "\n")

    (outdir / "config.txt").write_text(emit_config(config))
    return PipelineResult(rec, segments, rttm_path, enhanced, score, list(cache.hits), list(cache.misses))
