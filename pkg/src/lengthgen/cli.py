"""Command-line entry point: ``lengthgen {gen-data,train,eval,oracle,report}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure (divergence, checkpoint mismatch), 3 missing or unreadable files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .evaluator import oracle_value, r2_correlation, trace_from_rows
from .experiment import (
    ConfigValidationError,
    ExperimentConfig,
    SIDECAR,
    build_datasets,
    evaluate,
    output_root,
    prepare_run_dir,
    provenance,
    read_datasets,
    train,
    write_datasets,
    write_report,
)
from .numtheory import Op, TaskKind
from .trainer import TrainingDiverged, read_metrics

log = logging.getLogger("lengthgen")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


def _load_config(args) -> tuple[ExperimentConfig, bytes | None]:
    raw = None
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        raw = path.read_bytes()
        cfg = ExperimentConfig.from_dict(json.loads(raw))
    else:
        cfg = ExperimentConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
        raw = None
    return cfg.validate(), raw


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.run_dir) if args.run_dir else output_root() / cfg.name


# --- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg, _ = _load_config(args)
    out = Path(args.out) if args.out else _run_dir(args, cfg) / "data"
    data = build_datasets(cfg)
    write_datasets(cfg, data, out)
    print(f"train {len(data.train)}  id-test {len(data.id_test)}  " + "  ".join(f"{s.name} {len(s)}" for s in data.ood.values()))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, raw = _load_config(args)
    run_dir = prepare_run_dir(cfg, _run_dir(args, cfg), raw)
    data = None
    if args.data:
        data_dir = Path(args.data)
        if not (data_dir / SIDECAR).exists():
            raise FileNotFoundError(f"dataset sidecar not found: {data_dir / SIDECAR}")
        data = read_datasets(cfg, data_dir)
    result, data = train(cfg, run_dir, data, resume=not args.no_resume)
    print(f"trained {result.step} steps; run directory {run_dir}")
    if not args.skip_eval:
        report = evaluate(cfg, result.model, data, provenance(cfg, run_dir, result.step))
        write_report(report, run_dir)
        print(report.pretty())
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.resolved.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"run configuration not found: {cfg_path}")
    cfg = ExperimentConfig.load(cfg_path)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / "last.ckpt"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    model, ckpt = checkpoint.restore_model(ckpt_path)
    if ckpt.model_config != cfg.model_config().to_dict():
        raise checkpoint.CheckpointError(f"{ckpt_path} does not match the model in {cfg_path}")
    data_dir = Path(args.data) if args.data else run_dir / "data"
    data = read_datasets(cfg, data_dir)
    report = evaluate(cfg, model, data, provenance(cfg, run_dir, ckpt.step) | {"checkpoint": str(ckpt_path)})
    write_report(report, run_dir)
    print(report.pretty())
    return EXIT_OK


def cmd_oracle(args) -> int:
    op = Op(args.op)
    if not op.modular:
        raise ConfigValidationError("the oracle applies to modular tasks only")
    task = TaskKind(op, args.p)
    lengths = _parse_range(args.m)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["p", "n", "m", "exact", "accuracy", "percent"])
    for m in lengths:
        value = oracle_value(task, args.n, m)
        writer.writerow([args.p, args.n, m, str(value), f"{float(value):.6f}", f"{100 * float(value):.2f}%"])
    return EXIT_OK


def _parse_range(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out or min(out) < 1:
        raise ConfigValidationError(f"bad length range {text!r}")
    return out


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "metrics.csv"
    report_path = run_dir / "report.json"
    if not metrics_path.exists() and not report_path.exists():
        raise FileNotFoundError(f"{run_dir} holds neither metrics.csv nor report.json")
    out = Path(args.out) if args.out else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if metrics_path.exists():
        rows = read_metrics(metrics_path)
        written += _dynamics_csvs(rows, out)
    if report_path.exists():
        report = json.loads(report_path.read_text())
        written.append(_final_csv(report, out))
        print(_table(report))
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _write_long(path: Path, header: list[str], records) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(records)
    return path


def _dynamics_csvs(rows: list[dict], out: Path) -> list[Path]:
    acc, digits, r2 = [], [], []
    for row in rows:
        step = row["step"]
        for key, value in row.items():
            if key.startswith("acc_true["):
                suite = key[len("acc_true[") : -1]
                acc.append([step, suite, value, row.get(f"acc_learned[{suite}]"), row.get(f"fail[{suite}]")])
            elif key.startswith("digit_"):
                digits.append([step, int(key.split("_")[1]), value])
            elif key.startswith("r2_"):
                r2.append([step, int(key.split("_")[1]), value])
    paths = [
        _write_long(out / "accuracy.csv", ["step", "suite", "acc_vs_true", "acc_vs_learned", "failure_rate"], acc),
        _write_long(out / "digits.csv", ["step", "position", "accuracy"], digits),
        _write_long(out / "r2.csv", ["step", "position", "r2"], r2),
        _write_long(out / "loss.csv", ["step", "loss", "wall_clock"], [[r["step"], r["loss"], r["wall_clock"]] for r in rows]),
    ]
    trace = trace_from_rows(rows)
    if len(trace.steps) >= 3:
        corr = r2_correlation(trace)
        k = corr.shape[0]
        records = [[i + 1, j + 1, corr[i, j]] for i in range(k) for j in range(k)]
        paths.append(_write_long(out / "r2_correlation.csv", ["position_i", "position_j", "correlation"], records))
    return paths


def _final_csv(report: dict, out: Path) -> Path:
    header = ["suite", "length", "samples", "mode", "acc_vs_true", "acc_vs_learned", "failure_rate", "oracle", "oracle_exact", "oracle_count"]
    records = [[r[h] for h in header] for r in report["rows"]]
    return _write_long(out / "final.csv", header, records)


def _pct(v) -> str:
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100 * v:.2f}%"


def _table(report: dict) -> str:
    lines = [f"{report['task']}  trained length n={report['train_length']}", f"{'suite':<22}{'vs f':>10}{'vs f^':>10}{'theory':>10}"]
    for r in report["rows"]:
        lines.append(f"{r['suite']:<22}{_pct(r['acc_vs_true']):>10}{_pct(r['acc_vs_learned']):>10}{_pct(r['oracle']):>10}")
    return "\n".join(lines)


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lengthgen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry, e.g. train.max_steps=500")
        p.add_argument("--run-dir", help="run directory (default: $LENGTHGEN_OUTPUT_ROOT/<name>)")

    p = sub.add_parser("gen-data", help="write train / id-test / ood-test files and a sidecar")
    config_args(p)
    p.add_argument("--out", help="output directory (default: <run-dir>/data)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, then evaluate it")
    config_args(p)
    p.add_argument("--data", help="read datasets from this directory instead of generating them")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint")
    p.add_argument("--skip-eval", action="store_true", help="do not write the final report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on its suites")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint", help="checkpoint file (default: <run_dir>/last.ckpt)")
    p.add_argument("--data", help="dataset directory (default: <run_dir>/data)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="predicted accuracy of the truncated function on longer operands")
    p.add_argument("--p", type=int, required=True, help="modulus")
    p.add_argument("--n", type=int, required=True, help="trained operand length")
    p.add_argument("--m", default="5..9", help="test lengths, e.g. 5..9 or 5,7")
    p.add_argument("--op", default="modadd", choices=[Op.MODADD.value, Op.MODMUL.value])
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="plot-ready CSVs and a summary table for a run")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default: <run_dir>/plots)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, checkpoint.CheckpointError) as exc:
        code, message = EXIT_RUNTIME, str(exc)
    except ValueError as exc:
        code, message = EXIT_INVALID, str(exc)
    except OSError as exc:
        code, message = EXIT_IO, str(exc)
    print(f"error: {message}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
