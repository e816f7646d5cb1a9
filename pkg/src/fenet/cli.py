"""
``fenet`` command line.

Data goes to files or stdout; progress goes to stderr. On failure the last
line on stderr is ``error: <category>: <message>`` and the exit code tells
the category apart.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from fractions import Fraction
from dataclasses import replace
from pathlib import Path

import numpy as np

from fenet import energy
from fenet.errors import ConfigError, FenetError, FormatError, InvalidInputError, NumericError
from fenet.model import read_checkpoint, write_checkpoint
from fenet.rr_signal import (
    ingest_pulses,
    read_epoch_file,
    read_label_file,
    read_pulse_file,
    synth_cohort,
    write_epoch_file,
)
from fenet.train import (
    TrainConfig,
    evaluate,
    grid_search,
    make_split,
    make_windows,
    parse_config_text,
    predict_record,
    read_config,
    result_row,
    train,
    window_metrics,
    write_results,
)

log = logging.getLogger("fenet")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_CONFIG = 5
EXIT_NUMERIC = 6
EXIT_INPUT = 7

DEFAULT_SEED = 0


def _duty_cycle(text: str) -> Fraction:
    try:
        value = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a duty cycle: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError("duty cycle must lie in (0, 1]")
    return value


def _load_config(path, overrides):
    cfg = read_config(path) if path else TrainConfig()
    if overrides:
        cfg = parse_config_text("\n".join(overrides), cfg)
    return cfg


def _training_windows(records, cfg: TrainConfig):
    """Epoch-level split of all windows into train/val/test per the config ratios."""
    windows = make_windows(records, cfg.m, dense=cfg.dense)
    if len(windows) == 0:
        raise ConfigError("no labelled windows in the training data")
    if cfg.split == "patient":
        folds = make_split([r.patient_id for r in records], cfg.split_plan())
        _, val_ids = folds[0]
        val_mask = np.isin(windows.patient, list(val_ids))
        return windows.subset(~val_mask), windows.subset(val_mask)
    tr, va, _ = make_split(len(windows), cfg.split_plan())
    return windows.subset(tr), windows.subset(va)


def _progress(record):
    parts = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()]
    print(" ".join(parts), file=sys.stderr)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_ingest(args):
    label_files = args.labels or []
    if label_files and len(label_files) != len(args.pulses):
        raise ConfigError("give one --labels file per pulse file")
    matrices = []
    for k, path in enumerate(args.pulses):
        pulses = read_pulse_file(path)
        labels = read_label_file(label_files[k]) if label_files else None
        mat, report = ingest_pulses(pulses, labels)
        if report.n_clipped:
            log.warning("%s: %d RR values clipped to the physiological range",
                        pulses.patient_id, report.n_clipped)
        if report.dropout_epochs:
            log.warning("%s: sensor dropout (>10 s without a pulse) in epochs %s",
                        pulses.patient_id, ",".join(str(i + 1) for i in report.dropout_epochs))
        matrices.append(mat)
    write_epoch_file(matrices, args.out)
    log.info("wrote %d patients to %s", len(matrices), args.out)


def cmd_synth(args):
    if args.band[0] > args.band[1]:
        raise InvalidInputError("breath band must be given low then high")
    cohort = synth_cohort(args.seed, args.patients, args.minutes, args.apnea_rate,
                          breath_freq_band=tuple(args.band))
    write_epoch_file(cohort, args.out)
    log.info("wrote %d synthetic patients x %d minutes to %s", args.patients, args.minutes, args.out)


def cmd_train(args):
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    records = read_epoch_file(args.data)
    tr, va = _training_windows(records, cfg)
    t0 = time.perf_counter()
    model, history = train(tr, cfg, va if len(va) else None,
                           progress=None if args.quiet else _progress)
    wall = time.perf_counter() - t0
    write_checkpoint(model, args.checkpoint)
    if args.history:
        with open(args.history, "w") as fh:
            for rec in history.epochs:
                fh.write(json.dumps(rec) + "\n")
    if args.metrics:
        rows = []
        if len(va):
            rows.append(result_row(0, "default", "val", window_metrics(model, va), wall))
        rows.append(result_row(0, "default", "train", window_metrics(model, tr), wall))
        with open(args.metrics, "w", newline="") as fh:
            write_results(rows, fh)
    log.info("trained %d epochs in %.1f s; checkpoint %s", len(history.epochs), wall, args.checkpoint)


def cmd_eval(args):
    model = read_checkpoint(args.checkpoint)
    records = read_epoch_file(args.data)
    t0 = time.perf_counter()
    rep = evaluate(model, records)
    row = result_row(args.run_id, "checkpoint", "test", rep, time.perf_counter() - t0)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_results([row], fh)
    else:
        write_results([row], sys.stdout)


def cmd_predict(args):
    model = read_checkpoint(args.checkpoint)
    records = read_epoch_file(args.data)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("patient_id\tepoch_index\tlabel\n")
        for rec in records:
            flat = predict_record(model, rec)
            for i, lab in enumerate(flat):
                out.write(f"{rec.patient_id}\t{i + 1}\t{int(lab)}\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_energy(args):
    if args.profiles:
        devices, sensors = energy.read_profiles(args.profiles)
        devices = devices or list(energy.DEVICES)
        sensors = sensors or list(energy.SENSORS)
    else:
        devices, sensors = list(energy.DEVICES), list(energy.SENSORS)
    if args.device:
        devices = [d for d in devices if d.name in args.device]
    if args.sensor:
        sensors = [s for s in sensors if s.name in args.sensor]
    rows = energy.feasibility_report(devices, sensors, args.hours, args.duty_cycle)
    text = energy.report_table(rows) if args.format == "table" else energy.report_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gridsearch(args):
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    records = read_epoch_file(args.data)
    tr, va = _training_windows(records, cfg)
    if len(va) == 0:
        raise ConfigError("grid search needs a non-empty validation split")
    best_point, best_model, rows = grid_search(cfg, tr, va, workers=args.workers)
    with open(args.results, "w", newline="") as fh:
        write_results(rows, fh)
    write_checkpoint(best_model, args.checkpoint)
    log.info("best grid point %s", best_point)
    print(";".join(f"{k}={v}" for k, v in best_point.items()))


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fenet", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="pulse timestamp files -> epoch file")
    p.add_argument("pulses", nargs="+", help="pulse files, one patient each (id = file stem)")
    p.add_argument("--labels", nargs="+", help="per-minute label files (0/1/?), one per pulse file")
    p.add_argument("--out", required=True, help="epoch file to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic labelled cohort as an epoch file")
    p.add_argument("--out", required=True, help="epoch file to write")
    p.add_argument("--patients", type=int, default=20, help="number of patients (default 20)")
    p.add_argument("--minutes", type=int, default=200, help="minutes per patient (default 200)")
    p.add_argument("--apnea-rate", type=float, default=0.5, help="apnea fraction in [0,1] (default 0.5)")
    p.add_argument("--band", type=float, nargs=2, default=(0.2, 0.3), metavar=("LO", "HI"),
                   help="breathing band in Hz, within [1/6, 1/3] (default 0.2 0.3)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="random seed (default 0)")
    p.set_defaults(func=cmd_synth)

    for name, helptext, func in (
        ("train", "train a model on an epoch file", cmd_train),
        ("gridsearch", "grid search over lambda2, l and kernel width", cmd_gridsearch),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("data", help="labelled epoch file")
        p.add_argument("--config", help="key=value training config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--checkpoint", required=True, help="checkpoint file to write")
        if name == "train":
            p.add_argument("--history", help="write per-epoch history as JSON lines")
            p.add_argument("--metrics", help="write train/val metrics records (CSV)")
            p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
        else:
            p.add_argument("--results", required=True, help="results table to write (CSV)")
            p.add_argument("--workers", type=int, default=1, help="parallel training runs (default 1)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a labelled epoch file")
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("data", help="labelled epoch file")
    p.add_argument("--out", help="metrics file (CSV); stdout when omitted")
    p.add_argument("--run-id", default="eval", help="run_id column value (default eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="unfolded label timeline from window-centre epochs")
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("data", help="epoch file (labels ignored)")
    p.add_argument("--out", help="output file; stdout when omitted")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("energy", help="overnight charge budget per device, sensor and duty cycle")
    p.add_argument("--profiles", help="profile file with device/sensor rows (built-ins when omitted)")
    p.add_argument("--device", action="append", help="restrict to this device name (repeatable)")
    p.add_argument("--sensor", action="append", help="restrict to this sensor name (repeatable)")
    p.add_argument("--hours", type=float, default=8.0, help="monitoring duration T (default 8)")
    p.add_argument("--duty-cycle", type=_duty_cycle, nargs="+",
                   default=list(energy.DUTY_CYCLES),
                   help="duty cycles such as 1 1/3 (default 1 1/3 1/5 1/7 1/9)")
    p.add_argument("--format", choices=("csv", "table"), default="csv",
                   help="csv (default) or aligned table")
    p.add_argument("--out", help="output file; stdout when omitted")
    p.set_defaults(func=cmd_energy)
    return parser


_EXIT_CODES = (
    (FormatError, EXIT_PARSE),
    (ConfigError, EXIT_CONFIG),
    (NumericError, EXIT_NUMERIC),
    (InvalidInputError, EXIT_INPUT),
    (FenetError, 1),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except FenetError as exc:
        code = next(c for cls, c in _EXIT_CODES if isinstance(exc, cls))
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
