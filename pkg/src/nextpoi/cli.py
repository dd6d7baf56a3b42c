"""Command-line entry point: ingest, stats, split, fit-spatial, synth, train,
evaluate and recommend.

Every subcommand that writes files also writes ``<first output>.manifest.json``
holding the argv, resolved flags and SHA-256 digests of inputs and outputs.
``nextpoi --rerun MANIFEST`` replays a manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import model as lbp_model
from .checkins import (
    build_transitions,
    chronological_split,
    compute_stats,
    ingest,
    load_split,
    read_checkins,
    write_checkins,
    _build_dataset,
)
from .errors import ConfigError, NextPoiError
from .evaluation import (
    DEFAULT_CUTOFFS,
    evaluate_run,
    recommend_top_n,
    report_series,
    report_table,
    reports_json,
)
from .features import featurize_time
from .spatial import DEFAULT_FIT_BINS, DEFAULT_FIT_CUTOFF_KM, fit_displacements
from .synth import SynthConfig, align_truth, generate
from .trainer import TrainConfig, train, write_trace

logger = logging.getLogger("nextpoi")

EXIT_MISSING_FILE = 3
MODEL_ENV = "NEXTPOI_MODEL"


# ------------------------------------------------------------------ helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return fh.readlines()


def _write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_manifest(args, argv, inputs, outputs, unhashed=()):
    """Reproducibility record placed next to the first output."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "rerun")}
    doc = {
        "tool": "nextpoi",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "flags": flags,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "unhashed_outputs": [str(p) for p in unhashed],
    }
    path = Path(str(outputs[0]) + ".manifest.json")
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _cutoffs(text):
    try:
        vals = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cutoff list {text!r}")
    if not vals or vals[0] < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return vals


def _load_split_files(train_path, test_path, fraction=0.8):
    test_lines = _read_lines(test_path) if test_path else []
    return load_split(_read_lines(train_path), test_lines, fraction)


# -------------------------------------------------------------- subcommands


def cmd_ingest(args, argv):
    ds = ingest(_read_lines(args.input), args.min_checkins)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_checkins(ds, fh)
    print(f"users {ds.n_users}  pois {ds.n_pois}  checkins {ds.n_checkins}")
    _write_manifest(args, argv, [args.input], [args.out])


def cmd_stats(args, argv):
    ds = ingest(_read_lines(args.input), args.min_checkins)
    report = compute_stats(ds, utc_offset_hours=args.utc_offset, fit_cutoff_km=args.fit_cutoff)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        txt, js = Path(args.out + ".txt"), Path(args.out + ".json")
        _write_text(txt, text)
        _write_text(js, report.to_json() + "\n")
        _write_manifest(args, argv, [args.input], [txt, js])


def cmd_split(args, argv):
    ds = ingest(_read_lines(args.input), args.min_checkins)
    sp = chronological_split(ds, args.fraction)
    for part, path in ((sp.train, args.train_out), (sp.test, args.test_out)):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            write_checkins(part, fh)
    print(f"train {sp.train.n_checkins} checkins  test {sp.test.n_checkins} checkins "
          f"({sp.test.n_users} users with held-out events)")
    _write_manifest(args, argv, [args.input], [args.train_out, args.test_out])


def cmd_fit_spatial(args, argv):
    ds = _build_dataset(read_checkins(_read_lines(args.input)))
    d = np.array([t.distance_km for t in build_transitions(ds)])
    fit = fit_displacements(d, args.max_distance, args.bins)
    print(f"a {fit.a:.6g}  k {fit.k:.6g}  r2 {fit.r_squared:.6g}  points {fit.n_points}")
    if args.out:
        _write_text(args.out, json.dumps(fit.to_dict(), indent=2, sort_keys=True) + "\n")
        _write_manifest(args, argv, [args.input], [args.out])


_SYNTH_FLAG_SKIP = {"seed"}


def _synth_config(args):
    kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(SynthConfig)}
    try:
        return SynthConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e))


def cmd_synth(args, argv):
    corpus = generate(_synth_config(args))
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_checkins(corpus.records, fh)
    outputs = [args.out]
    if args.truth_out:
        lbp_model.save(align_truth(corpus.truth, corpus.dataset), args.truth_out)
        outputs.append(args.truth_out)
    ds = corpus.dataset
    print(f"users {ds.n_users}  pois {ds.n_pois}  checkins {ds.n_checkins}")
    _write_manifest(args, argv, [], outputs)


def _train_config(args):
    return TrainConfig(
        K=args.patterns, D=args.dims, lambda_theta=args.lambda_theta, learning_rate=args.lr,
        epochs=args.epochs, negatives_per_positive=args.negatives, seed=args.seed, mode=args.model,
        init_sigma=args.init_sigma, convergence_tol=args.tol, time_bins=args.time_bins,
        utc_offset_hours=args.utc_offset, max_gap_hours=args.max_gap_hours,
        gate_warmup_epochs=args.gate_warmup, full_batch=args.full_batch,
    )


def cmd_train(args, argv):
    config = _train_config(args)
    sp = _load_split_files(args.train, args.test)
    result = train(sp.train, config)
    lbp_model.save(result.model, args.out)
    outputs, unhashed = [args.out], []
    if args.trace:
        with open(args.trace, "w", encoding="utf-8", newline="\n") as fh:
            write_trace(result.trace, fh)
        unhashed.append(args.trace)  # wall-clock column
    last = result.trace[-1] if result.trace else None
    if last is not None:
        print(f"epochs {last.epoch}  audit objective {last.audit_objective:.6g}")
    inputs = [args.train] + ([args.test] if args.test else [])
    _write_manifest(args, argv, inputs, outputs, unhashed)


def cmd_evaluate(args, argv):
    if not args.model:
        raise ConfigError(f"no model given (use --model or set {MODEL_ENV})")
    sp = _load_split_files(args.train, args.test)
    models = [lbp_model.load(p) for p in args.model]
    ids = args.names.split(",") if args.names else [Path(p).stem for p in args.model]
    if len(ids) != len(models):
        raise ConfigError("--names must list one name per model")
    reports = evaluate_run(models, sp, args.cutoffs, ids, per_user=args.per_user,
                           dataset_id=sp.train.fingerprint()[:16])
    table = report_table(reports)
    sys.stdout.write(table)
    if args.out:
        txt, js, tsv = Path(args.out + ".txt"), Path(args.out + ".json"), Path(args.out + ".series.tsv")
        _write_text(txt, table)
        _write_text(js, reports_json(reports) + "\n")
        _write_text(tsv, report_series(reports))
        _write_manifest(args, argv, [args.train, args.test] + list(args.model), [txt, js, tsv])


def cmd_recommend(args, argv):
    if not args.model:
        raise ConfigError(f"no model given (use --model or set {MODEL_ENV})")
    m = lbp_model.load(args.model)
    if args.user not in m.user_ids:
        raise ConfigError(f"unknown user {args.user!r}")
    if args.prev_poi not in m.poi_ids:
        raise ConfigError(f"unknown POI {args.prev_poi!r}")
    u, i = m.user_ids.index(args.user), m.poi_ids.index(args.prev_poi)
    cat = int(m.poi_category[i])
    label = m.schema.category_labels[cat] if cat >= 0 else None
    ctx = featurize_time(float(args.time), label, m.schema)
    top = recommend_top_n(m, u, i, ctx, args.topn)
    text = "".join(f"{m.poi_ids[l]}\t{s:.6g}\n" for l, s in top)
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, "".join(f"{m.poi_ids[l]}\t{s!r}\n" for l, s in top))
        _write_manifest(args, argv, [args.model], [args.out])


# ------------------------------------------------------------------- parser


def _add_synth_flags(p):
    for f in dataclasses.fields(SynthConfig):
        if f.name in _SYNTH_FLAG_SKIP:
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=f.default)
        else:
            p.add_argument(flag, dest=f.name, type=type(f.default), default=f.default)


def build_parser():
    parser = argparse.ArgumentParser(prog="nextpoi", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--rerun", metavar="MANIFEST", help="replay the argv recorded in a manifest")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", help="parse, validate and filter a raw check-in file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--min-checkins", type=int, default=10)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="corpus statistics report")
    p.add_argument("input")
    p.add_argument("--out", help="prefix for <out>.txt and <out>.json")
    p.add_argument("--min-checkins", type=int, default=10)
    p.add_argument("--utc-offset", type=float, default=0.0)
    p.add_argument("--fit-cutoff", type=float, default=DEFAULT_FIT_CUTOFF_KM)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="chronological per-user train/test split")
    p.add_argument("input")
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--min-checkins", type=int, default=10)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fit-spatial", help="power-law fit of successive displacements")
    p.add_argument("input")
    p.add_argument("--out")
    p.add_argument("--max-distance", type=float, default=DEFAULT_FIT_CUTOFF_KM)
    p.add_argument("--bins", type=int, default=DEFAULT_FIT_BINS)
    p.set_defaults(func=cmd_fit_spatial)

    p = sub.add_parser("synth", help="synthetic corpus from a planted model")
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", help="also save the planted parameters as a model file")
    p.add_argument("--seed", type=int, default=0)
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a GPDM or PPDM model")
    p.add_argument("--train", required=True)
    p.add_argument("--test", help="held-out file, only used to build shared indexes")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--model", choices=("gpdm", "ppdm"), default="gpdm")
    p.add_argument("--patterns", type=int, default=6)
    p.add_argument("--dims", type=int, default=60)
    p.add_argument("--lambda", dest="lambda_theta", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-sigma", type=float)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--time-bins", type=int, default=24)
    p.add_argument("--utc-offset", type=float, default=0.0)
    p.add_argument("--max-gap-hours", type=float)
    p.add_argument("--gate-warmup", type=int, default=0)
    p.add_argument("--full-batch", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="precision@N for one or more models")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--model", action="append", default=None)
    p.add_argument("--names", help="comma-separated model names")
    p.add_argument("--cutoffs", type=_cutoffs, default=list(DEFAULT_CUTOFFS))
    p.add_argument("--per-user", action="store_true")
    p.add_argument("--out", help="prefix for <out>.txt, <out>.json and <out>.series.tsv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-N next POIs for one query")
    p.add_argument("--model", default=os.environ.get(MODEL_ENV))
    p.add_argument("--user", required=True)
    p.add_argument("--prev-poi", required=True)
    p.add_argument("--time", required=True, type=float, help="unix timestamp of the query")
    p.add_argument("--topn", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_recommend)
    return parser


def _rerun_argv(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("tool") != "nextpoi" or "argv" not in doc:
        raise ConfigError(f"{path} is not a nextpoi manifest")
    return list(doc["argv"])


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.rerun:
            argv = _rerun_argv(args.rerun)
            args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        if args.command == "evaluate" and args.model is None and os.environ.get(MODEL_ENV):
            args.model = [os.environ[MODEL_ENV]]
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args, argv)
    except NextPoiError as e:
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error [MissingFile]: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except SystemExit as e:  # argparse usage errors
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
