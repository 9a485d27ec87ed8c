"""Command-line entry point: run an experiment grid and write the result CSVs.

Output files (all in ``--out``)::

    rounds.csv          one row per (method, seed, round)
    summary.csv         final mean/std per method, plus dropout %
    fig_accuracy.csv    per-round mean/std accuracy per method
    fig_f1.csv          same for F1
    fig_auc.csv         same for AUC
    fig_dropout.csv     per-round mean dropout rate and roster size per method
    fig_privacy.csv     final accuracy against the swept value (or configured sigma)
    config.yaml         the resolved configuration
    transcripts/        one JSONL wire transcript per run (with --transcript)

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import DEFAULT, ExperimentConfig, SCHEMA, apply_overrides, dump_config, parse_config, parse_value
from .errors import ConfigError
from .orchestrator.engine import ROW_FIELDS, ExperimentResult, RunResult, run_experiment
from .orchestrator.methods import MethodConfig
from .orchestrator.protocol import write_transcript

logger = logging.getLogger("mcpfl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
DEFAULT_SWEEP_METHODS = ("mcp_fusion", "naive_dp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are configuration errors
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcpfl", description="Simulate secure multi-modal federated learning runs.")
    p.add_argument("--config", metavar="PATH", help="YAML config file (omitted keys take defaults)")
    p.add_argument("--methods", metavar="LIST", help="comma-separated methods, e.g. fedavg,fedavg@emr,mcp_fusion")
    p.add_argument("--seeds", metavar="LIST", help="comma-separated integer seeds")
    p.add_argument("--rounds", type=int, metavar="N", help="federated rounds per run")
    p.add_argument("--sweep", metavar="KEY=V1,V2,...", help="re-run the methods for each value of one config key")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", metavar="DIR", help="output directory (default: experiment.out_dir)")
    p.add_argument("--transcript", action="store_true", help="write JSONL wire transcripts")
    p.add_argument("--workers", type=int, metavar="N", help="threads for client-side work")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key}", key)
    return key, value


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else DEFAULT
    overrides = {}
    for item in args.set:
        key, value = _key_value(item)
        overrides[key] = parse_value(value)
    if args.methods:
        overrides["experiment.methods"] = _split(args.methods)
    if args.seeds:
        try:
            overrides["experiment.seeds"] = [int(s) for s in _split(args.seeds)]
        except ValueError as exc:
            raise ConfigError(f"--seeds must be integers: {args.seeds}", "experiment.seeds") from exc
    if args.rounds is not None:
        overrides["experiment.rounds"] = args.rounds
    if args.out:
        overrides["experiment.out_dir"] = args.out
    if args.workers is not None:
        overrides["experiment.workers"] = args.workers
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def parse_sweep(text: str) -> tuple[str, list]:
    key, values = _key_value(text)
    parsed = [parse_value(v) for v in _split(values)]
    if not parsed:
        raise ConfigError(f"--sweep {key} has no values", key)
    return key, parsed


def run_sweep(
    cfg: ExperimentConfig, key: str, values: Sequence, methods: Sequence[MethodConfig], transcript: bool
) -> tuple[ExperimentResult, list[dict]]:
    """Run every method at every swept value; labels read ``method[key=value]``."""
    combined = ExperimentResult()
    points = []
    for value in values:
        cfg_v = apply_overrides(cfg, {key: value})
        cfg_v.validate()
        labelled = [replace(m, label=f"{m.label}[{key}={value}]") for m in methods]
        res = run_experiment(cfg_v, labelled, record_transcript=transcript)
        combined.runs.extend(res.runs)
        for m, lab in zip(methods, labelled):
            points.append({"method": m.label, "label": lab.label, "key": key, "value": value})
    return combined, points


# -- CSV writers ------------------------------------------------------------


def _fmt(v):
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(xs, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def dropout_fraction(run: RunResult) -> float:
    """Dropped / selected over all rounds of one run."""
    rows = run.history[1:]
    selected = sum(r["roster_size"] for r in rows)
    return sum(r["dropouts"] for r in rows) / selected if selected else 0.0


def write_rounds(result: ExperimentResult, path: Path) -> None:
    _write_csv(path, ROW_FIELDS, [[row[f] for f in ROW_FIELDS] for row in result.rows])


def summary_rows(result: ExperimentResult) -> list[list]:
    rows = []
    for label, runs in result.by_method().items():
        row = [label, len(runs)]
        for metric in ("accuracy", "f1", "auc"):
            row.extend(_mean_std([r.history[-1][metric] for r in runs]))
        row.extend(_mean_std([100.0 * dropout_fraction(r) for r in runs]))
        row.append(max(r.history[-1]["epsilon_spent_max"] for r in runs))
        rows.append(row)
    return rows


SUMMARY_FIELDS = (
    "method", "n_seeds", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std",
    "auc_mean", "auc_std", "dropout_pct_mean", "dropout_pct_std", "epsilon_spent_max",
)


def write_figures(result: ExperimentResult, out: Path) -> None:
    for metric in ("accuracy", "f1", "auc"):
        rows = []
        for label, runs in result.by_method().items():
            for i in range(len(runs[0].history)):
                mean, std = _mean_std([r.history[i][metric] for r in runs])
                rows.append([label, runs[0].history[i]["round"], mean, std])
        _write_csv(out / f"fig_{metric}.csv", ("method", "round", "mean", "std"), rows)

    rows = []
    for label, runs in result.by_method().items():
        for i in range(1, len(runs[0].history)):
            rate, _ = _mean_std([r.history[i]["dropout_rate"] for r in runs])
            roster, _ = _mean_std([r.history[i]["roster_size"] for r in runs])
            rows.append([label, i, rate, roster])
    _write_csv(out / "fig_dropout.csv", ("method", "round", "dropout_rate_mean", "roster_mean"), rows)


def write_privacy(result: ExperimentResult, points: list[dict], cfg: ExperimentConfig, out: Path) -> None:
    groups = result.by_method()
    if not points:
        # no sweep: one point per method at the configured noise level
        points = [
            {"method": label, "label": label, "key": "dp.sigma", "value": cfg.dp.sigma}
            for label in groups
        ]
    rows = []
    for pt in points:
        runs = groups[pt["label"]]
        acc = _mean_std([r.history[-1]["accuracy"] for r in runs])
        eps = max(r.history[-1]["epsilon_spent_max"] for r in runs)
        rows.append([pt["method"], pt["key"], pt["value"], acc[0], acc[1], eps])
    _write_csv(
        out / "fig_privacy.csv",
        ("method", "key", "value", "accuracy_mean", "accuracy_std", "epsilon_spent_max"),
        rows,
    )


def write_outputs(result: ExperimentResult, cfg: ExperimentConfig, out: Path, points: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_rounds(result, out / "rounds.csv")
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary_rows(result))
    write_figures(result, out)
    write_privacy(result, points, cfg, out)
    (out / "config.yaml").write_text(dump_config(cfg))
    if any(r.transcript is not None for r in result.runs):
        tdir = out / "transcripts"
        tdir.mkdir(exist_ok=True)
        for r in result.runs:
            name = "".join(c if c.isalnum() or c in "-_.@=" else "_" for c in r.method)
            write_transcript(r.transcript or [], tdir / f"{name}__seed{r.seed}.jsonl")


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        sweep = parse_sweep(args.sweep) if args.sweep else None
        if sweep and not args.methods:
            cfg = replace(cfg, methods=DEFAULT_SWEEP_METHODS)
        methods = cfg.method_configs()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if sweep:
            result, points = run_sweep(cfg, sweep[0], sweep[1], methods, args.transcript)
        else:
            result, points = run_experiment(cfg, methods, record_transcript=args.transcript), []
        write_outputs(result, cfg, Path(cfg.out_dir), points)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure mid-run is a runtime error
        logger.debug("run failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    for row in summary_rows(result):
        print(f"{row[0]:<36s} acc {row[2]:.4f} ± {row[3]:.4f}  dropout {row[8]:.1f}%")
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
