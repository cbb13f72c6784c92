"""Command-line entry point: one subcommand per stage plus ``run``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .audio import MultichannelAudio, read_wav, write_wav

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_arrays(paths) -> list[MultichannelAudio]:
    return [read_wav(p) for p in paths]


# --------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args):
    from .metrics import Rttm, write_rttm
    from .simulate import SceneSpec, simulate_scene

    spec = SceneSpec(num_speakers=args.speakers, num_arrays=args.arrays, channels_per_array=args.channels,
                     duration_sec=args.duration, overlap_ratio=args.overlap, snr_db=args.snr,
                     reverb_t60_sec=args.t60, seed=args.seed)
    audios, truth = simulate_scene(spec)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for k, audio in enumerate(audios):
        write_wav(out / f"{truth.recording_id}_array{k}.wav", audio)
    write_rttm(out / f"{truth.recording_id}.rttm", Rttm.from_segments(truth.recording_id, truth.reference))
    print(f"wrote {len(audios)} arrays and {truth.recording_id}.rttm to {out}")


def cmd_wpe(args):
    from .wpe import WpeConfig, wpe_process

    config = WpeConfig(taps=args.taps, delay=args.delay, alpha=args.alpha)
    write_wav(args.out, wpe_process(read_wav(args.inp), config))


def cmd_beamform(args):
    from .beamform import beamform

    write_wav(args.out, beamform(read_wav(args.inp), args.block_len, args.max_delay))


def cmd_sad(args):
    from .pipeline import sad_posteriors
    from .sad import viterbi_smooth
    from .segments import write_segments

    post, _ = sad_posteriors(_read_arrays(args.inp), args.fusion)
    write_segments(args.out, viterbi_smooth(post))


def cmd_diarize(args):
    from .diarize import first_pass, load_plda, train_simulated_plda
    from .metrics import Rttm, write_rttm
    from .segments import read_segments

    plda = load_plda(args.plda) if args.plda else train_simulated_plda()
    speech = read_segments(args.sad)
    segs, _, _ = first_pass(_read_arrays(args.inp), speech, plda, num_speakers=args.num_speakers,
                            fusion=args.fusion)
    rec = args.recording or Path(args.inp[0]).stem
    write_rttm(args.out, Rttm.from_segments(rec, segs))


def cmd_reseg(args):
    from .metrics import Rttm, read_rttm, write_rttm
    from .pipeline import PipelineConfig, _fit_rows, resegment, sad_posteriors
    from .reseg import heuristic_overlap, overlap_from_spans, read_overlap_spans
    from .segments import merge_segments

    audios = _read_arrays(args.inp)
    rttm = read_rttm(args.rttm)
    rec = rttm.recordings[0] if rttm.recordings else Path(args.inp[0]).stem
    first = rttm.segments(rec)
    n = int(round(audios[0].duration / 0.01))
    if args.overlap.startswith("oracle:"):
        mask = overlap_from_spans(read_overlap_spans(args.overlap.split(":", 1)[1]), n)
    elif args.overlap == "heuristic":
        post, flat = sad_posteriors(audios, "max")
        mask = heuristic_overlap(_fit_rows(post.speech[:, None], n)[:, 0], _fit_rows(flat[:, None], n)[:, 0])
    else:
        raise UsageError(f"--overlap must be 'heuristic' or 'oracle:<file>', got {args.overlap!r}")
    segs = resegment(audios, first, merge_segments(first) if first else [], mask, PipelineConfig())
    write_rttm(args.out, Rttm.from_segments(rec, segs))


def cmd_gss(args):
    from .gss import GssConfig, GssEnhancer
    from .metrics import read_rttm

    rttm = read_rttm(args.rttm)
    segments = rttm.segments(rttm.recordings[0]) if rttm.recordings else []
    targets = [s for s in segments if s.label == args.speaker]
    if not targets:
        raise ValueError(f"speaker {args.speaker!r} has no segments in {args.rttm}")
    enhancer = GssEnhancer(_read_arrays(args.inp), segments, GssConfig(context_sec=args.context))
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for seg in targets:
        result = enhancer.enhance(seg)
        name = f"{seg.label}-{int(round(seg.onset * 1000))}-{int(round(seg.end * 1000))}.wav"
        write_wav(out / name, result.audio)
    print(f"wrote {len(targets)} utterances to {out}")


def cmd_score(args):
    from .metrics import compute_der, format_score, read_rttm

    score = compute_der(read_rttm(args.ref), read_rttm(args.hyp), collar_sec=args.collar,
                        score_overlap=not args.ignore_overlap)
    print(format_score(score))


def cmd_run(args):
    from .pipeline import PipelineConfig, PipelineInputs, read_config, run_pipeline
    from .metrics import format_score

    config = read_config(args.config) if args.config else PipelineConfig()
    result = run_pipeline(config, PipelineInputs(args.inp, args.ref, args.overlap_spans), args.outdir)
    print(f"rttm: {result.rttm_path}")
    print(f"enhanced utterances: {len(result.enhanced)}")
    if result.score is not None:
        print(format_score(result.score))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="farfield", description="Far-field multi-array diarization and enhancement.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic multi-array scene and its reference RTTM")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--arrays", type=int, default=2)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--snr", type=float, default=20.0)
    p.add_argument("--t60", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("wpe", help="online WPE dereverberation")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taps", type=int, default=10)
    p.add_argument("--delay", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.9999)
    p.set_defaults(func=cmd_wpe)

    p = sub.add_parser("beamform", help="GCC-PHAT weighted delay-and-sum")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--block-len", type=float, default=0.5)
    p.add_argument("--max-delay", type=float, default=0.03)
    p.set_defaults(func=cmd_beamform)

    p = sub.add_parser("sad", help="speech activity detection with multi-array fusion")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--fusion", choices=("mean", "max"), default="max")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sad)

    p = sub.add_parser("diarize", help="first-pass PLDA/AHC diarization")
    p.add_argument("--sad", required=True)
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--plda", help="PLDA model file; trained on simulated speakers when omitted")
    p.add_argument("--fusion", choices=("mean", "max"), default="max")
    p.add_argument("--num-speakers", type=int, default=4)
    p.add_argument("--recording")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diarize)

    p = sub.add_parser("reseg", help="VB-HMM resegmentation and overlap assignment")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--rttm", required=True)
    p.add_argument("--overlap", default="heuristic", help="'heuristic' or 'oracle:<spans file>'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reseg)

    p = sub.add_parser("gss", help="guided source separation of one speaker's utterances")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--rttm", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--context", type=float, default=20.0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_gss)

    p = sub.add_parser("score", help="DER and JER of a hypothesis RTTM")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--ignore-overlap", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--ref", help="oracle RTTM (required for track1 and oracle stages)")
    p.add_argument("--overlap-spans", help="oracle overlap spans file")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    from .pipeline import ConfigError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"farfield {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"farfield {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
