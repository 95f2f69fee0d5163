"""Command-line entry point: ``sdda <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .alignment import euclidean_align_session
from .data import DatasetFormatError, Domain, SynthSpec, load_dataset, save_dataset, synth_generate
from .evaluation import ExperimentConfig, canonical_json, evaluate_network, load_config_file, resolve_domains, run_experiment
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig, train_sdda

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config(path: str) -> dict:
    try:
        raw = load_config_file(path)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    return raw


def _load(path: str, role: str) -> Domain:
    try:
        return load_dataset(path, role=role)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    except DatasetFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_synth(args) -> int:
    raw = _read_config(args.spec) if args.spec else {}
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth spec: {exc}") from exc
    source, target = synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(source, out / "source.sdda")
    save_dataset(target, out / "target.sdda")
    (out / "spec.json").write_text(canonical_json(spec.to_dict()))
    print(f"wrote {source.n_trials} source and {target.n_trials} target trials to {out}")
    return EXIT_OK


def cmd_align(args) -> int:
    domain = _load(args.input, "source")
    try:
        aligned = Domain([euclidean_align_session(s) for s in domain.sessions], domain.role, domain.n_classes)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_dataset(aligned, args.out)
    print(f"aligned {len(aligned.sessions)} session(s) -> {args.out}")
    return EXIT_OK


def _train_setup(raw: dict) -> tuple[TrainConfig, dict]:
    unknown = sorted(set(raw) - {"data", "train"})
    if unknown:
        raise UsageError(f"unknown train config keys: {unknown}")
    if "data" not in raw:
        raise UsageError("train config needs a 'data' section")
    try:
        config = TrainConfig.from_dict(raw.get("train", {}))
        # validate the data section the same way the experiment runner does
        ExperimentConfig(data=raw["data"], train=config)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc
    return config, raw["data"]


def cmd_train(args) -> int:
    raw = _read_config(args.config)
    config, data = _train_setup(raw)
    try:
        source, target = resolve_domains(data, Path(args.config).parent)
    except (FileNotFoundError, DatasetFormatError, TypeError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    try:
        result = train_sdda(config, source, target)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.student, out / "student.ckpt")
    save_checkpoint(result.teacher, out / "teacher.ckpt")
    (out / "history.json").write_text(canonical_json({"config": config.to_dict(), "history": result.history.to_list()}))
    last = result.history.records[-1]
    if last.target_accuracy is not None:
        print(f"final target accuracy {last.target_accuracy:.2f}%")
    print(f"checkpoints and history written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        net = load_checkpoint(args.student)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {args.student}") from exc
    except ValueError as exc:
        raise DataError(f"{args.student}: {exc}") from exc
    target = _load(args.data, "target")
    config = replace(TrainConfig(), scenario=args.scenario, n_labeled=args.n_labeled)
    try:
        per_target = evaluate_network(net, target, config)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    for entry in per_target:
        line = f"target {entry['target']}: accuracy {entry['accuracy']:.2f}%"
        if entry.get("auc") is not None:
            line += f"  auc {entry['auc']:.2f}"
        print(line)
    report = {
        "scenario": args.scenario,
        "n_labeled": args.n_labeled if args.scenario == "sda" else None,
        "targets": per_target,
        "accuracy": float(np.mean([e["accuracy"] for e in per_target])),
    }
    report_path = Path(args.report) if args.report else Path(args.student).with_suffix(".eval.json")
    report_path.write_text(canonical_json(report))
    print(f"mean accuracy {report['accuracy']:.2f}%  (report: {report_path})")
    return EXIT_OK


def cmd_run(args) -> int:
    raw = _read_config(args.config)
    try:
        ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment config: {exc}") from exc
    try:
        report = run_experiment(args.config, args.out)
    except (FileNotFoundError, DatasetFormatError) as exc:
        raise DataError(str(exc)) from exc
    failed = 0
    for cell in report.cells:
        failed += cell["n_failed"]
        print(
            f"{cell['scenario']:>3} {cell['variant']:<9} accuracy {cell['accuracy_mean']:6.2f} "
            f"+/- {cell['accuracy_std']:.2f}  ({cell['n_failed']} failed)"
        )
    print(f"report written to {Path(args.out) / 'report.json'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    ok, lines = run_suite(points=args.points, tol=args.tol, seed=args.seed)
    print("\n".join(lines))
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdda", description="Cross-headset EEG transfer with spatial distillation and domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic source/target pair")
    p.add_argument("--spec", help="JSON file with SynthSpec fields (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="apply session-wise Euclidean alignment to a dataset")
    p.add_argument("--in", dest="input", required=True, help="input dataset file")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train teacher and student, write checkpoints and history")
    p.add_argument("--config", required=True, help="JSON file with 'data' and 'train' sections")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a student checkpoint on a target dataset")
    p.add_argument("--student", required=True, help="student checkpoint")
    p.add_argument("--data", required=True, help="target dataset file")
    p.add_argument("--scenario", choices=("uda", "sda"), required=True)
    p.add_argument("--n-labeled", type=int, default=32, help="calibration trials per session for sda (default 32)")
    p.add_argument("--report", help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run a seeds x variants x scenarios sweep")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and objective")
    p.add_argument("--points", type=int, default=10, help="random points per primitive (default 10)")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sdda: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"sdda: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"sdda: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
