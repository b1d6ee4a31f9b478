"""Command-line front end: ``pls-reid <command> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from pls_reid import gan
from pls_reid.datagen import generate_synthetic, load_dataset, save_dataset, split_identities, split_one_shot
from pls_reid.errors import (
    DimensionMismatchError,
    InvalidParameterError,
    MalformedFileError,
    MissingTranslatorError,
    PlsError,
)
from pls_reid.evaluation import CURVE_COLUMNS, MetricsReport, evaluate, make_protocol, write_report
from pls_reid.mining import dump_assignments_csv, dump_matrix_csv, mine_iteration
from pls_reid.model import load_checkpoint, save_checkpoint
from pls_reid.trainer import (
    LOG_FIELDS,
    TrainConfig,
    format_config,
    load_config,
    load_state,
    prepare,
    run_pls,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
STATE_DIR = "state"
LOG_NAME = "metrics.jsonl"
MODEL_NAME = "model.npz"
REPORT_NAME = "report.json"
CONFIG_NAME = "config.txt"

# errors caused by bad inputs rather than by the computation itself
_VALIDATION_ERRORS = (InvalidParameterError, MalformedFileError, DimensionMismatchError, MissingTranslatorError)


class UsageError(Exception):
    pass


def _positive(typ):
    def conv(text):
        v = typ(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v

    return conv


def _existing(text):
    if not Path(text).is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return text


def _check_exists(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"no such file: {p}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    full = generate_synthetic(
        args.C + args.test_C, args.per, args.D, args.A,
        identity_spread=args.identity_spread,
        camera_shift_scale=args.camera_shift,
        noise_scale=args.noise,
        seed=args.seed,
        informative_dims=args.informative_dims,
    )
    if args.test_C:
        train, test = split_identities(full, args.C)
        save_dataset(test, args.test_out)
    else:
        train = full
    save_dataset(train, args.out)


def cmd_train_gan(args) -> None:
    ds = load_dataset(args.data)
    tr = gan.train_translators(
        ds, args.epochs, args.cycle_weight, args.seed, generator=args.generator
    )
    gan.save_translators(tr, args.out)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            json.dump(tr.history, fh)
            fh.write("\n")


def cmd_augment(args) -> None:
    ds = load_dataset(args.data)
    tr = gan.load_translators(args.translators)
    enhanced = gan.augment_dataset(ds, tr)
    save_dataset(enhanced.dataset, args.out)


def _train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.loss is not None:
        overrides["loss_mode"] = args.loss
    if args.camera_mode:
        overrides["camera_mode"] = True
    return dataclasses.replace(config, **overrides) if overrides else config


def cmd_train(args) -> None:
    config = _train_config(args)
    ds = load_dataset(args.data)
    eval_ds = load_dataset(args.eval_data) if args.eval_data else None
    translators = gan.load_translators(args.translators) if args.translators else None
    out = Path(args.out_dir)
    state_dir = out / STATE_DIR
    state = None
    if args.resume:
        if not (state_dir / "state.json").is_file():
            raise UsageError(f"nothing to resume in {out}")
        state = load_state(state_dir)
        if format_config(state.config) != format_config(config):
            raise UsageError("--resume with a configuration that differs from the saved run")
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(format_config(config), encoding="utf-8")

    split = split_one_shot(ds, config.shots, config.split_seed)
    eval_data = None
    if eval_ds is not None:
        eval_data = (eval_ds, make_protocol(eval_ds, config.eval_seed, config.same_camera_exclusion))
    state = run_pls(
        ds, split, config, eval_data,
        translators=translators, state=state,
        checkpoint_dir=state_dir, log_path=out / LOG_NAME,
        max_iterations=args.max_iterations,
    )
    save_checkpoint(state.params, out / MODEL_NAME)
    if eval_data is not None:
        report = evaluate(state.params, *eval_data)
    else:
        report = MetricsReport(cmc={}, mAP=None)
    if state.history:
        last = state.history[-1]
        report.pseudo_precision = last["pseudo_precision"]
        report.pseudo_recall = last["pseudo_recall"]
        report.pseudo_ratio = last["ratio"]
    write_report(report, out / REPORT_NAME)


def cmd_mine_step(args) -> None:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.camera_mode:
        config = dataclasses.replace(config, camera_mode=True)
    ds = load_dataset(args.data)
    params = load_checkpoint(args.model)
    enhanced = None
    if config.camera_mode:
        if not args.translators:
            raise MissingTranslatorError("camera-mode mining needs --translators")
        enhanced = gan.augment_dataset(ds, gan.load_translators(args.translators))
    split = split_one_shot(ds, config.shots, config.split_seed)
    view, _ = prepare(ds, split, config, enhanced)
    pseudo, M = mine_iteration(
        params, view.inputs, view.ref_groups, view.unlabeled, args.T,
        camera_mode=view.camera_mode, A=view.A, iteration=args.iteration,
    )
    dump_assignments_csv(pseudo, args.out)
    if args.matrix_out:
        dump_matrix_csv(M, args.matrix_out)


def cmd_evaluate(args) -> None:
    ds = load_dataset(args.data)
    params = load_checkpoint(args.model)
    protocol = make_protocol(ds, args.seed, not args.no_same_camera_exclusion)
    write_report(evaluate(params, ds, protocol), args.out)


def read_log(path) -> list[dict]:
    """Parse a metrics log, insisting on consecutive iterations starting at 1."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedFileError(f"{path}: not JSON ({exc.msg})", line=lineno) from None
            missing = [k for k in LOG_FIELDS if k not in row]
            if missing:
                raise MalformedFileError(f"{path}: missing {', '.join(missing)}", line=lineno)
            expected = len(rows) + 1
            if row["iteration"] != expected:
                raise MalformedFileError(
                    f"{path}: gap in iterations, expected {expected} but found {row['iteration']}",
                    line=lineno, field="iteration",
                )
            rows.append(row)
    if not rows:
        raise MalformedFileError(f"{path}: empty metrics log")
    return rows


_LOG_KEY = {"ratio": "ratio", "rank1": "rank1", "mAP": "mAP", "precision": "pseudo_precision", "recall": "pseudo_recall"}


def _cell(v):
    return "" if v is None else repr(float(v))


def cmd_report(args) -> None:
    logs = [read_log(p) for p in args.logs]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if len(logs) == 1:
            w.writerow(CURVE_COLUMNS)
            for row in logs[0]:
                w.writerow([_cell(row[_LOG_KEY[c]]) for c in CURVE_COLUMNS])
            return
        labels = args.labels or [Path(p).stem if Path(p).stem != "metrics" else Path(p).parent.name for p in args.logs]
        if len(labels) != len(logs):
            raise UsageError("--labels must name every log")
        w.writerow(["iteration"] + [f"{lab}.{c}" for lab in labels for c in CURVE_COLUMNS])
        for k in range(max(len(rows) for rows in logs)):
            out = [k + 1]
            for rows in logs:
                row = rows[k] if k < len(rows) else None
                out += [_cell(row[_LOG_KEY[c]]) if row else "" for c in CURVE_COLUMNS]
            w.writerow(out)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pls-reid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--C", type=_positive(int), required=True, help="training identities")
    g.add_argument("--per", type=_positive(int), required=True, help="samples per identity")
    g.add_argument("--D", type=_positive(int), default=16, help="feature dimension (default 16)")
    g.add_argument("--A", type=_positive(int), required=True, help="cameras")
    g.add_argument("--identity-spread", type=float, default=10.0)
    g.add_argument("--camera-shift", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--informative-dims", type=_positive(int), default=None,
                   help="identity centers vary only in the first K dimensions")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-C", type=int, default=0, help="extra held-out identities written to --test-out")
    g.add_argument("--test-out")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-gan", help="train camera-pair translators on a dataset")
    t.add_argument("--data", type=_existing, required=True)
    t.add_argument("--epochs", type=_positive(int), default=200)
    t.add_argument("--lambda", dest="cycle_weight", type=float, default=10.0, help="cycle-consistency weight")
    t.add_argument("--generator", choices=("affine", "mlp"), default="affine")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--history", help="optional JSON file for per-epoch losses")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_gan)

    a = sub.add_parser("augment", help="add one generated copy per real sample and other camera")
    a.add_argument("--data", type=_existing, required=True)
    a.add_argument("--translators", type=_existing, required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)

    r = sub.add_parser("train", help="run the full pseudo-label sampling loop")
    r.add_argument("--data", type=_existing, required=True,
                   help="training dataset; labels of non-anchor samples are used for diagnostics only")
    r.add_argument("--config", type=_existing, help="key = value file mirroring TrainConfig")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--eval-data", type=_existing, help="held-out dataset for rank-k / mAP")
    r.add_argument("--loss", choices=("msm", "hsoften"), help="override loss_mode")
    r.add_argument("--camera-mode", action="store_true", help="override camera_mode to true")
    r.add_argument("--translators", type=_existing, help="pretrained translators for camera mode")
    r.add_argument("--resume", action="store_true", help="continue the run saved in --out-dir")
    r.add_argument("--max-iterations", type=_positive(int), help="stop after this many mining iterations")
    r.set_defaults(func=cmd_train)

    m = sub.add_parser("mine-step", help="mine pseudo labels once with a saved model")
    m.add_argument("--data", type=_existing, required=True)
    m.add_argument("--model", type=_existing, required=True)
    m.add_argument("--config", type=_existing)
    m.add_argument("--T", type=_positive(int), required=True)
    m.add_argument("--iteration", type=int, default=1)
    m.add_argument("--camera-mode", action="store_true")
    m.add_argument("--translators", type=_existing)
    m.add_argument("--matrix-out", help="optional row,col,distance CSV")
    m.add_argument("--out", required=True, help="col,identity,iteration CSV")
    m.set_defaults(func=cmd_mine_step)

    e = sub.add_parser("evaluate", help="rank-k and mAP of a saved model")
    e.add_argument("--data", type=_existing, required=True)
    e.add_argument("--model", type=_existing, required=True)
    e.add_argument("--seed", type=int, default=0, help="query selection seed")
    e.add_argument("--no-same-camera-exclusion", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("report", help="merge metrics logs into curve CSV")
    c.add_argument("--logs", nargs="+", type=_existing, required=True)
    c.add_argument("--labels", nargs="+", help="column prefixes when several logs are given")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_report)
    return p


def _validate(args) -> None:
    if args.command == "gen-data":
        if args.test_C < 0:
            raise UsageError("--test-C must be >= 0")
        if args.test_C and not args.test_out:
            raise UsageError("--test-C needs --test-out")
    if args.command == "mine-step" and args.camera_mode and not args.translators:
        raise UsageError("--camera-mode needs --translators")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        args.func(args)
    except UsageError as exc:
        print(f"pls-reid {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _VALIDATION_ERRORS as exc:
        print(f"pls-reid {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PlsError, OSError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"pls-reid {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
