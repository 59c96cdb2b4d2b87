"""Command-line entry point: ``durmod <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import align as AL
from . import features as F
from .infer import heatmap, modify_duration
from .mask import write_pgm
from .model import config_from_params, load_checkpoint, save_checkpoint
from .synth import warp_features, warp_waveform
from .train import (NumericalError, SyntheticPair, load_config, synth_dataset, train,
                    write_metrics)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- subcommands


def cmd_extract(args) -> None:
    feats = F.extract(F.read_wav(args.wav), n_mels=args.n_mels, hop_ms=args.hop_ms)
    F.write_features(feats, args.output)


def write_corpus(pairs, out, slope: float, first_id: int = 0) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, pair in enumerate(pairs, first_id):
        pid = f"{k:05d}"
        src, tgt, ali = f"{pid}_src.dwft", f"{pid}_tgt.dwft", f"{pid}_true.align"
        F.write_features(pair.X, out / src)
        F.write_features(pair.Y, out / tgt)
        AL.write_alignment(pair.true_path, out / ali, slope, 1)
        rows.append([pid, src, tgt, ali, f"{pair.ratio:.6f}"])
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "source_feat", "target_feat", "align_path", "ratio"])
        w.writerows(rows)


def cmd_synth_data(args) -> None:
    if not 0 <= args.holdout < args.n:
        raise UsageError(f"--holdout must be in [0, {args.n}), got {args.holdout}")
    pairs = synth_dataset(args.n, (args.min_len, args.max_len), args.slope, args.classes,
                          args.seed, n_mels=args.n_mels)
    if args.holdout == 0:
        write_corpus(pairs, args.output, args.slope)
        return
    cut = args.n - args.holdout
    write_corpus(pairs[:cut], Path(args.output) / "train", args.slope)
    write_corpus(pairs[cut:], Path(args.output) / "heldout", args.slope, cut)


def load_corpus(directory) -> list[SyntheticPair]:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise F.FormatError(f"{directory}: no manifest.csv")
    pairs = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            X = F.read_features(directory / row["source_feat"])
            Y = F.read_features(directory / row["target_feat"])
            path, _ = AL.read_alignment(directory / row["align_path"])
            pairs.append(SyntheticPair(X, Y, path))
    if not pairs:
        raise F.FormatError(f"{manifest}: no pairs listed")
    return pairs


def _overrides(args) -> dict:
    values = {}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = val.strip()
    for key in ("seed", "max_epochs", "learning_rate", "d_model", "n_enc_blocks", "n_dec_blocks"):
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    return values


def cmd_train(args) -> None:
    try:
        model_cfg, loss_cfg, schedule = load_config(args.config, _overrides(args))
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    pairs = load_corpus(args.data)
    if pairs[0].X.n_mels != model_cfg.d_in:
        raise F.FormatError(f"corpus has {pairs[0].X.n_mels} bands, config d_in={model_cfg.d_in}")
    params, history = train(pairs, model_cfg, loss_cfg, schedule, jobs=args.jobs)
    save_checkpoint(params, args.output)
    metrics = args.metrics or str(args.output) + ".metrics.csv"
    write_metrics(history, metrics)


def _align_one(job):
    feat_path, ckpt, slope, max_consec, seed, out_path = job
    params = load_checkpoint(ckpt)
    cfg = config_from_params(params, slope, max_consec)
    X = F.read_features(feat_path)
    res = modify_duration(X, params, cfg, np.random.default_rng(seed))
    AL.write_alignment(res.path, out_path, slope, max_consec)
    return res


def cmd_align(args) -> None:
    feats = [Path(f) for f in args.feat]
    if len(feats) == 1:
        outs = [Path(args.output)]
    else:
        Path(args.output).mkdir(parents=True, exist_ok=True)
        outs = [Path(args.output) / (f.stem + ".align") for f in feats]
    jobs = [(f, args.model, args.slope, args.max_consec, args.seed, o) for f, o in zip(feats, outs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_align_one, jobs))
    else:
        results = [_align_one(j) for j in jobs]
    if args.heatmap and len(results) == 1:
        write_pgm(heatmap(results[0].attention, results[0].path), args.heatmap)


def _is_wav(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == b"RIFF"


def cmd_warp(args) -> None:
    path, _ = AL.read_alignment(args.align)
    if _is_wav(args.input):
        F.write_wav(warp_waveform(F.read_wav(args.input), path, hop_ms=args.hop_ms), args.output)
    else:
        F.write_features(warp_features(F.read_features(args.input), path), args.output)


def cmd_eval(args) -> None:
    pred, _ = AL.read_alignment(args.pred)
    truth, _ = AL.read_alignment(args.truth)
    ratio = AL.match_ratio(AL.encode_moves(pred), AL.encode_moves(truth))
    err = AL.length_error_ms_per_sec(pred.T_t, truth.T_t)
    print(f"match_ratio={ratio:.3f}")
    print(f"len_err_ms_per_sec={err:.1f}")


def cmd_plot_attention(args) -> None:
    params = load_checkpoint(args.model)
    cfg = config_from_params(params, args.slope, args.max_consec)
    res = modify_duration(F.read_features(args.feat), params, cfg, np.random.default_rng(args.seed))
    write_pgm(heatmap(res.attention, res.path), args.output)


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="durmod", description="Adaptive speech duration modification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract", help="WAV -> log mel features")
    s.add_argument("wav")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--n-mels", type=int, default=F.N_MELS)
    s.add_argument("--hop-ms", type=float, default=F.HOP_MS)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("synth-data", help="write a synthetic parallel corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--slope", type=float, default=1.25)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-len", type=int, default=40)
    s.add_argument("--max-len", type=int, default=120)
    s.add_argument("--n-mels", type=int, default=F.N_MELS)
    s.add_argument("--holdout", type=int, default=0,
                   help="put the last N pairs in <output>/heldout and the rest in <output>/train")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a model on a synthetic corpus")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--metrics", help="metrics CSV path (default: <output>.metrics.csv)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", dest="max_epochs", type=int)
    s.add_argument("--lr", dest="learning_rate", type=float)
    s.add_argument("--d-model", type=int)
    s.add_argument("--n-enc-blocks", type=int)
    s.add_argument("--n-dec-blocks", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("align", help="open-loop alignment from source features")
    s.add_argument("feat", nargs="+")
    s.add_argument("--model", required=True)
    s.add_argument("--slope", type=float, default=1.25)
    s.add_argument("--max-consec", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--heatmap", help="also write an attention PGM (single input only)")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("warp", help="warp a WAV or feature file along an alignment")
    s.add_argument("input")
    s.add_argument("--align", required=True)
    s.add_argument("--hop-ms", type=float, default=F.HOP_MS)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("eval", help="compare a predicted alignment with the truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot-attention", help="attention heatmap with the path overlaid")
    s.add_argument("feat")
    s.add_argument("--model", required=True)
    s.add_argument("--slope", type=float, default=1.25)
    s.add_argument("--max-consec", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_plot_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"durmod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, AL.InfeasiblePathError, FloatingPointError) as exc:
        print(f"durmod: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (F.FormatError, ValueError, OSError) as exc:
        print(f"durmod: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
