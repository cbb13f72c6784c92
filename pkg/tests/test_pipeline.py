import numpy as np
import pytest

from farfield.audio import write_wav
from farfield.metrics import Rttm, read_rttm, write_rttm
from farfield.pipeline import (
    CACHE_ENV,
    ConfigError,
    PipelineConfig,
    PipelineInputs,
    default_cache_dir,
    emit_config,
    parse_config,
    run_pipeline,
)
from farfield.simulate import SceneSpec, simulate_scene

FAST = {"gss.iterations": 3, "diarize.plda_scenes": 3, "diarize.num_speakers": 2}


def test_parse_config_types_and_comments():
    cfg = parse_config("# header\nwpe.taps = 6  # fewer taps\nwpe.enabled = false\nsad.fusion = mean\n\ngss.context=15\n")
    assert cfg["wpe.taps"] == 6 and cfg["wpe.enabled"] is False
    assert cfg["sad.fusion"] == "mean" and cfg["gss.context"] == 15.0
    assert cfg["wpe.delay"] == 3


@pytest.mark.parametrize(
    "text, match",
    [
        ("wpe.tapz = 3\n", "line 1: unknown key"),
        ("\nwpe.taps 3\n", "line 2"),
        ("wpe.taps = x\n", "wpe.taps"),
        ("sad.fusion = median\n", "sad.fusion"),
        ("pipeline.mode = track3\n", "pipeline.mode"),
        ("gss.enabled = maybe\n", "gss.enabled"),
    ],
)
def test_config_schema_violations(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_config_round_trip():
    cfg = PipelineConfig({"reseg.overlap": "oracle", "score.collar": 0.25, "wpe.enabled": False})
    assert parse_config(emit_config(cfg)) == cfg


def test_cache_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "c"))
    assert default_cache_dir(tmp_path / "out") == tmp_path / "c"
    monkeypatch.delenv(CACHE_ENV)
    assert default_cache_dir(tmp_path / "out") == tmp_path / "out" / "cache"


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    audios, truth = simulate_scene(
        SceneSpec(num_speakers=2, num_arrays=2, channels_per_array=2, duration_sec=10, overlap_ratio=0.1, seed=4)
    )
    paths = []
    for k, audio in enumerate(audios):
        paths.append(str(root / f"a{k}.wav"))
        write_wav(paths[-1], audio)
    ref = root / "ref.rttm"
    write_rttm(ref, Rttm.from_segments(truth.recording_id, truth.reference))
    return paths, str(ref), truth


def test_track2_produces_scoreable_rttm_and_reuses_cache(scene, tmp_path):
    paths, ref, truth = scene
    cfg = PipelineConfig(FAST)
    first = run_pipeline(cfg, PipelineInputs(paths, ref), tmp_path / "out", cache_dir=tmp_path / "cache")
    assert first.recording_id == truth.recording_id
    assert first.rttm_path.exists() and (tmp_path / "out" / "scores.txt").exists()
    assert 0.0 <= first.score.der < 1.0
    assert first.cache_hits == []
    assert {k.split("-")[0] for k in first.cache_misses} == {"wpe", "beamform", "sad", "diarize", "reseg", "gss"}
    assert len(first.enhanced) == len(first.segments)

    again = run_pipeline(cfg, PipelineInputs(paths, ref), tmp_path / "out", cache_dir=tmp_path / "cache")
    assert again.cache_misses == []
    assert again.segments == first.segments

    changed = run_pipeline(cfg.updated({"reseg.min_duration": 0.5}), PipelineInputs(paths, ref), tmp_path / "o2",
                           cache_dir=tmp_path / "cache")
    assert [k.split("-")[0] for k in changed.cache_misses] == ["reseg", "gss"]


def test_deterministic_across_fresh_caches(scene, tmp_path):
    paths, ref, _ = scene
    cfg = PipelineConfig({**FAST, "gss.enabled": False})
    a = run_pipeline(cfg, PipelineInputs(paths, ref), tmp_path / "a", cache_dir=tmp_path / "ca")
    b = run_pipeline(cfg, PipelineInputs(paths, ref), tmp_path / "b", cache_dir=tmp_path / "cb")
    assert a.rttm_path.read_text() == b.rttm_path.read_text()


def test_track1_runs_gss_on_oracle_segments(scene, tmp_path):
    paths, ref, truth = scene
    res = run_pipeline(PipelineConfig({**FAST, "pipeline.mode": "track1"}), PipelineInputs(paths, ref),
                       tmp_path / "out", cache_dir=tmp_path / "cache")
    assert {k.split("-")[0] for k in res.cache_misses} == {"wpe", "gss"}
    assert res.segments == sorted(read_rttm(ref).segments(truth.recording_id))
    assert len(res.enhanced) == len(truth.reference)
    assert not (tmp_path / "out" / "sad.txt").exists()


@pytest.mark.parametrize(
    "overrides",
    [
        {"sad.oracle": True},
        {"diarize.oracle": True},
        {"sad.oracle": True, "diarize.oracle": True, "reseg.overlap": "oracle"},
        {"reseg.overlap": "none"},
        {"reseg.enabled": False},
        {"wpe.enabled": False},
    ],
)
def test_oracle_stage_swaps_do_not_break_downstream(scene, tmp_path, overrides):
    paths, ref, _ = scene
    cfg = PipelineConfig({**FAST, "gss.enabled": False, **overrides})
    res = run_pipeline(cfg, PipelineInputs(paths, ref), tmp_path / "out", cache_dir=tmp_path / "cache")
    assert res.score is not None and np.isfinite(res.score.der)


def test_oracle_diarization_scores_perfectly(scene, tmp_path):
    paths, ref, _ = scene
    cfg = PipelineConfig({"sad.oracle": True, "diarize.oracle": True, "reseg.enabled": False, "gss.enabled": False})
    res = run_pipeline(cfg, PipelineInputs(paths, ref), tmp_path / "out", cache_dir=tmp_path / "cache")
    assert res.score.der == 0.0


def test_missing_inputs(scene, tmp_path):
    paths, ref, _ = scene
    with pytest.raises(ValueError, match="oracle RTTM"):
        run_pipeline(PipelineConfig({"pipeline.mode": "track1"}), PipelineInputs(paths), tmp_path / "o")
    with pytest.raises(ValueError):
        run_pipeline(PipelineConfig(), PipelineInputs([]), tmp_path / "o")
    with pytest.raises(ValueError, match="not found"):
        run_pipeline(PipelineConfig({"pipeline.recording": "other", "gss.enabled": False}),
                     PipelineInputs(paths, ref), tmp_path / "o", cache_dir=tmp_path / "c")
