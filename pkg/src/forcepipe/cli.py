"""``forcepipe`` command line.

Exit codes: 0 success, 64 usage/config error, 2 I/O error, 3 runtime error.
Logs go to standard error; results go to files and standard output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from forcepipe import __version__
from forcepipe.config import ExperimentConfig, load_config, parse_imu_channels
from forcepipe.dataset import Condition, DatasetManifest
from forcepipe.errors import ConfigError, ForcepipeError, UnsupportedCombination
from forcepipe.evaluation import (
    evaluate_saved,
    fusion_compare,
    rank_statistics,
    run_ablation,
    run_experiment,
    write_comparison,
    write_report,
)
from forcepipe.preprocess import MODALITIES, read_store, segment_manifest, write_store
from forcepipe.synthgen import generate_dataset

log = logging.getLogger("forcepipe")

EXIT_OK = 0
EXIT_IO = 2
EXIT_RUNTIME = 3
EXIT_USAGE = 64

MODALITY_ALIASES = {"time": "emg_time", "freq": "emg_freq", "imu": "imu",
                    "emg_time": "emg_time", "emg_freq": "emg_freq"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# shared argument groups
# --------------------------------------------------------------------------

def _add_source(p, required_out=True):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path, help="dataset manifest.json (raw trials)")
    src.add_argument("--store", type=Path, help="segment store written by 'preprocess'")
    p.add_argument("--out", type=Path, required=required_out, help="output directory")


def _add_experiment(p):
    p.add_argument("--config", type=Path, help="experiment config (YAML)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--scheme", choices=("intra", "inter"), help="override scheme")
    p.add_argument("--condition", choices=tuple(c.value for c in Condition), help="override condition")
    p.add_argument("--fusion", choices=("feature", "input", "score"), help="override fusion strategy")
    p.add_argument("--segment-ms", type=int, choices=(50, 100, 150), help="override segment length")
    p.add_argument("--modality-subset", help="comma list of time,freq,imu (override modalities)")
    p.add_argument("--imu-channels", help="acc, gyro, mag or comma list of IMU channel indices")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--batch-size", type=int, help="override mini-batch size")
    p.add_argument("--subjects", help="comma list of subject ids to include")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forcepipe", description="Multimodal EMG/IMU force estimation pipeline.")
    parser.add_argument("--version", action="version", version=f"forcepipe {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=16, help="number of subjects (default 16)")
    p.add_argument("--trials", type=int, default=12, help="trials per condition (dynamic: 3x)")
    p.add_argument("--repetitions", type=int, default=3, help="flexion/extension cycles per trial")
    p.add_argument("--conditions", default="isotonic,isokinetic,dynamic", help="comma list of conditions")
    p.add_argument("--seed", type=int, default=0, help="generator seed")

    p = sub.add_parser("preprocess", help="condition, mask and segment trials into a segment store")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--out", type=Path, required=True, help="segment store directory")
    p.add_argument("--segment-ms", type=int, choices=(50, 100, 150), default=50, help="window length")
    p.add_argument("--condition", choices=tuple(c.value for c in Condition), help="only this condition")
    p.add_argument("--subjects", help="comma list of subject ids")

    for name, helptext in (
        ("train", "train models and write the experiment report"),
        ("ablate", "modality and IMU-sensor ablation report"),
        ("fusion-compare", "compare feature-, input- and score-level fusion"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_source(p)
        _add_experiment(p)

    for name, helptext in (
        ("eval", "evaluate trained checkpoints on their holdout sets"),
        ("plot-export", "write measured vs estimated force CSV per holdout trial"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_source(p)
        _add_experiment(p)
        p.add_argument("--models", type=Path, help="checkpoint directory (default: <out>/models)")

    p = sub.add_parser("stats", help="Friedman test and Nemenyi post-hoc on a scores matrix")
    p.add_argument("--scores", type=Path, required=True,
                   help="CSV: header 'method,<block>...', one row of scores per method")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--force-posthoc", action="store_true", help="run Nemenyi even if Friedman does not reject")
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else None


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {}
    for attr, key in (("seed", "seed"), ("scheme", "scheme"), ("condition", "condition"), ("fusion", "fusion"),
                      ("segment_ms", "segment_ms"), ("epochs", "epochs"), ("batch_size", "batch_size")):
        value = getattr(args, attr, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "modality_subset", None):
        try:
            changes["modalities"] = tuple(MODALITY_ALIASES[m] for m in _csv_list(args.modality_subset))
        except KeyError as exc:
            raise ConfigError(f"unknown modality {exc.args[0]!r} (use time, freq, imu)") from None
    if getattr(args, "imu_channels", None):
        changes["imu_channels"] = parse_imu_channels(args.imu_channels)
    if getattr(args, "subjects", None):
        changes["subjects"] = tuple(_csv_list(args.subjects))
    return config.replace(**changes) if changes else config


def _source(args, config: ExperimentConfig):
    if args.store is not None:
        if not (args.store / "store.json").is_file():
            raise FileNotFoundError(f"no segment store at {args.store}")
        return read_store(args.store, config.condition, config.subjects)
    if not args.manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    return DatasetManifest.load(args.manifest)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    manifest = generate_dataset(
        args.out, n_subjects=args.subjects, trials_per_condition=args.trials, seed=args.seed,
        conditions=tuple(_csv_list(args.conditions)), repetitions=args.repetitions,
    )
    path = args.out / "manifest.json"
    print(path)
    log.info("%d trials for %d subjects", len(manifest.trials), len(manifest.subjects()))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    if not args.manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    manifest = DatasetManifest.load(args.manifest)
    skipped = []
    segments = segment_manifest(
        manifest, args.segment_ms, args.condition, _csv_list(args.subjects),
        on_skip=lambda desc, reason: skipped.append(desc.trial_id),
    )
    write_store(segments, args.out, skipped)
    total = sum(len(s) for s in segments)
    shapes = {}
    for m in MODALITIES:
        inner = segments[0].shapes()[m][1:] if segments else ()
        shapes[m] = "x".join([str(total), *map(str, inner)])
    summary = {"trials": len(segments), "skipped": len(skipped), "segments": total, "shapes": shapes}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for m in MODALITIES:
        print(f"{m}: ({shapes[m]})")
    print(f"trials: {len(segments)} skipped: {len(skipped)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    source = _source(args, config)
    report = run_experiment(source, config, model_dir=args.out / "models")
    write_report(report, args.out, "train")
    _emit({"mean_r2": report.mean, "sd_r2": report.sd, "units": len(report.units)})
    return EXIT_OK


def _saved_report(args):
    config = resolve_config(args)
    source = _source(args, config)
    return evaluate_saved(source, config, args.models or args.out / "models")


def cmd_eval(args) -> int:
    report = _saved_report(args)
    write_report(report, args.out, "eval")
    _emit({"mean_r2": report.mean, "sd_r2": report.sd, "units": len(report.units)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    rep = run_ablation(_source(args, config), config)
    write_comparison(rep, args.out, "ablation")
    _emit({r["name"]: r["mean_r2"] for r in rep.summary()})
    return EXIT_OK


def cmd_fusion_compare(args) -> int:
    config = resolve_config(args)
    rep = fusion_compare(_source(args, config), config)
    write_comparison(rep, args.out, "fusion")
    _emit({r["name"]: r["mean_r2"] for r in rep.summary()})
    return EXIT_OK


def read_scores(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ConfigError(f"{path}: need a header and at least one method row")
    names = [r[0] for r in rows[1:]]
    try:
        scores = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric score ({exc})") from None
    return names, rows[0][1:], scores


def cmd_stats(args) -> int:
    if not args.scores.is_file():
        raise FileNotFoundError(f"scores file not found: {args.scores}")
    names, blocks, scores = read_scores(args.scores)
    res = rank_statistics(scores, force_posthoc=args.force_posthoc)
    out = {
        "methods": names,
        "blocks": blocks,
        "friedman": {"statistic": res.statistic, "p_value": res.p_value, "k": res.k, "n": res.n},
        "mean_ranks": dict(zip(names, res.mean_ranks.tolist())),
    }
    if res.nemenyi is not None:
        out["nemenyi"] = {
            "alpha": 0.05,
            "critical_difference": res.nemenyi.critical_difference,
            "pairs": [{"a": a, "b": b, "rank_gap": g, "significant": s} for a, b, g, s in res.nemenyi.pairs(names)],
        }
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "stats.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit({"statistic": res.statistic, "p_value": res.p_value})
    return EXIT_OK


def cmd_plot_export(args) -> int:
    report = _saved_report(args)
    out = args.out / "plot"
    out.mkdir(parents=True, exist_ok=True)
    n_files = 0
    for unit in report.units:
        by_trial = {}
        for trial_id, ts, measured, estimated in unit.predictions:
            by_trial.setdefault(trial_id, []).append((ts, measured, estimated))
        for trial_id in sorted(by_trial):
            rows = sorted(by_trial[trial_id])
            name = f"{unit.unit}__{trial_id.replace('/', '_')}.csv"
            with open(out / name, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["timestamp_s", "measured_N", "estimated_N"])
                w.writerows((repr(t), repr(m), repr(e)) for t, m, e in rows)
            n_files += 1
    print(f"{n_files} files in {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "fusion-compare": cmd_fusion_compare,
    "stats": cmd_stats,
    "plot-export": cmd_plot_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UnsupportedCombination) as exc:
        print(f"forcepipe: config error [{exc.module}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"forcepipe: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ForcepipeError as exc:
        print(f"forcepipe: error [{exc.module}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
