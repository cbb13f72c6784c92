import pytest

from farfield.audio import read_wav
from farfield.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from farfield.metrics import read_rttm


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = main(["simulate", "--speakers", "2", "--arrays", "2", "--channels", "2", "--duration", "6",
                 "--overlap", "0.1", "--seed", "3", "--outdir", str(out)])
    assert code == EXIT_OK
    return out


def _arrays(d):
    return sorted(str(p) for p in d.glob("*_array*.wav"))


def _rttm(d):
    return str(next(d.glob("*.rttm")))


def test_simulate_writes_arrays_and_reference(scene_dir):
    paths = _arrays(scene_dir)
    assert len(paths) == 2
    assert read_wav(paths[0]).num_channels == 2
    assert len(read_rttm(_rttm(scene_dir)).recordings) == 1


def test_signal_stages(scene_dir, tmp_path):
    src = _arrays(scene_dir)[0]
    assert main(["wpe", "--in", src, "--out", str(tmp_path / "w.wav"), "--taps", "4"]) == EXIT_OK
    assert read_wav(tmp_path / "w.wav").num_channels == 2
    assert main(["beamform", "--in", src, "--out", str(tmp_path / "b.wav")]) == EXIT_OK
    assert read_wav(tmp_path / "b.wav").num_channels == 1
    assert main(["sad", "--in", *_arrays(scene_dir), "--out", str(tmp_path / "sad.txt")]) == EXIT_OK
    assert (tmp_path / "sad.txt").read_text().strip()


def test_score_reference_against_itself(scene_dir, capsys):
    ref = _rttm(scene_dir)
    assert main(["score", "--ref", ref, "--hyp", ref]) == EXIT_OK
    assert "DER" in capsys.readouterr().out


def test_gss_writes_named_utterances(scene_dir, tmp_path):
    ref = _rttm(scene_dir)
    speaker = read_rttm(ref).segments(read_rttm(ref).recordings[0])[0].label
    assert main(["gss", "--in", *_arrays(scene_dir), "--rttm", ref, "--speaker", speaker,
                 "--outdir", str(tmp_path)]) == EXIT_OK
    names = [p.name for p in tmp_path.glob("*.wav")]
    assert names and all(n.startswith(speaker + "-") for n in names)
    assert main(["gss", "--in", *_arrays(scene_dir), "--rttm", ref, "--speaker", "nobody",
                 "--outdir", str(tmp_path)]) == EXIT_DATA


def test_run_with_oracle_config(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("sad.oracle = true\ndiarize.oracle = true\nreseg.enabled = false\ngss.enabled = false\n")
    code = main(["run", "--config", str(cfg), "--in", *_arrays(scene_dir), "--ref", _rttm(scene_dir),
                 "--outdir", str(tmp_path / "out")])
    assert code == EXIT_OK
    assert "DER" in capsys.readouterr().out
    assert (tmp_path / "out" / "config.txt").exists()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["nonsense"],
        ["wpe", "--in", "x.wav"],
        ["sad", "--in", "x.wav", "--fusion", "median", "--out", "o"],
        ["score", "--ref", "a"],
    ],
)
def test_usage_errors_exit_1(argv):
    assert main(argv) == EXIT_USAGE


def test_bad_config_exits_1(scene_dir, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("wpe.taps = many\n")
    assert main(["run", "--config", str(cfg), "--in", *_arrays(scene_dir), "--outdir", str(tmp_path)]) == EXIT_USAGE


def test_bad_reseg_overlap_exits_1(scene_dir, tmp_path):
    assert main(["reseg", "--in", *_arrays(scene_dir), "--rttm", _rttm(scene_dir), "--overlap", "guess",
                 "--out", str(tmp_path / "r.rttm")]) == EXIT_USAGE


def test_missing_data_exits_2(tmp_path):
    assert main(["wpe", "--in", str(tmp_path / "missing.wav"), "--out", str(tmp_path / "o.wav")]) == EXIT_DATA
    assert main(["score", "--ref", str(tmp_path / "a.rttm"), "--hyp", str(tmp_path / "b.rttm")]) == EXIT_DATA
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file")
    assert main(["beamform", "--in", str(bad), "--out", str(tmp_path / "o.wav")]) == EXIT_DATA
