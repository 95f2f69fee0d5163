"""Metrics, experiment sweeps and the canonical report format."""

from __future__ import annotations

import decimal
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import Domain, SynthSpec, load_dataset, synth_generate
from .training import ABLATIONS, SCENARIOS, TrainConfig, predict, split_target, train_sdda

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
SIGNIFICANT_DIGITS = 10

# Interpretation flags copied into every report so results can be traced
# back to the choices that produced them.
DESIGN_FLAGS = {
    "confusion_input": "softened_probabilities",
    "distill_kl_direction": "student_to_teacher",
    "distill_teacher_mode": "eval",
    "kernel_bandwidth": "median_heuristic_detached",
    "mmd_estimator": "biased_v_statistic",
    "uncertainty_weights": "differentiated",
    "alternation": "teacher_then_student_per_batch",
    "student_batch": "source_target_concatenated_when_target_terms_active",
    "sda_reference": "calibration_trials_frozen",
    "argmax_tie_break": "lowest_index",
    "std_ddof": 0,
}


def accuracy(predicted, labels) -> float:
    """Percentage of positions where ``predicted`` equals ``labels``."""
    predicted = np.asarray(predicted).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predicted.shape != labels.shape:
        raise ValueError(f"{predicted.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * float(np.count_nonzero(predicted == labels)) / labels.size


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], x.size]
    avg = (starts + ends + 1) / 2.0  # 1-based mean rank of each run
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("auc expects binary labels in {0, 1}")
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """All-pairs reference for :func:`auc`, quadratic in n."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs both classes present")
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (pos.size * neg.size)


# ---------------------------------------------------------------------------
# canonical serialization


def _canonical(obj, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        text = format(x, f".{SIGNIFICANT_DIGITS}g")
        if math.isinf(float(text)):
            # rounding pushed a value near the float maximum out of range; truncate instead
            with decimal.localcontext(decimal.Context(prec=SIGNIFICANT_DIGITS, rounding=decimal.ROUND_DOWN)):
                text = format(+decimal.Decimal(x), f".{SIGNIFICANT_DIGITS}g")
        return text
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_canonical(obj[k], indent + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(pad + _canonical(v, indent + 1) for v in seq) + "\n" + "  " * indent + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, two-space indent, floats at a fixed number of significant digits.

    Parsing the output and serializing it again reproduces it byte for byte.
    """
    return _canonical(obj) + "\n"


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=0))


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep: seeds x ablation variants x scenarios over a single domain pair.

    ``data`` is either ``{"synth": {...SynthSpec fields}}`` or
    ``{"source": path, "target": path}``; relative paths resolve against the
    config file's directory.
    """

    data: dict
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    variants: tuple[str, ...] = ("SDDA",)
    scenarios: tuple[str, ...] = ("uda",)
    keep_histories: bool = True

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in ABLATIONS]
        if unknown:
            raise ValueError(f"unknown ablation variants {unknown}; choose from {sorted(ABLATIONS)}")
        bad = [s for s in self.scenarios if s not in SCENARIOS]
        if bad:
            raise ValueError(f"unknown scenarios {bad}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if set(self.data) not in ({"synth"}, {"source", "target"}):
            raise ValueError("data must hold either 'synth' or both 'source' and 'target'")

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {unknown}")
        raw = dict(raw)
        if "data" not in raw:
            raise ValueError("experiment config needs a 'data' section")
        if "synth" in raw["data"]:
            SynthSpec.from_dict(raw["data"]["synth"])  # validate early
        raw["train"] = TrainConfig.from_dict(raw.get("train", {}))
        for key in ("seeds", "variants", "scenarios"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "scenarios": list(self.scenarios),
            "keep_histories": self.keep_histories,
        }


def load_config_file(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc


def resolve_domains(data: dict, base: Path | None = None) -> tuple[Domain, Domain]:
    if "synth" in data:
        return synth_generate(SynthSpec.from_dict(data["synth"]))
    base = base or Path(".")
    return (
        load_dataset(base / data["source"], role="source"),
        load_dataset(base / data["target"], role="target"),
    )


@dataclass
class ExperimentReport:
    config: dict
    cells: list[dict]
    format_version: int = REPORT_FORMAT_VERSION
    design_flags: dict = field(default_factory=lambda: dict(DESIGN_FLAGS))

    def summary(self) -> dict[tuple[str, str], tuple[float, float]]:
        return {(c["scenario"], c["variant"]): (c["accuracy_mean"], c["accuracy_std"]) for c in self.cells}

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config,
            "design_flags": self.design_flags,
            "cells": self.cells,
        }

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> ExperimentReport:
        raw = json.loads(text)
        return cls(raw["config"], raw["cells"], raw["format_version"], raw["design_flags"])


def evaluate_network(net, target: Domain, config: TrainConfig) -> list[dict]:
    """Accuracy (and AUC for two classes) on each held-out target session."""
    split = split_target(target, config.scenario, config.n_labeled)
    out = []
    for i, (session, ref) in enumerate(zip(split.test, split.test_references)):
        predicted, scores = predict(net, session, ref)
        entry = {"target": i, "n_trials": session.n_trials, "accuracy": accuracy(predicted, session.labels)}
        if target.n_classes == 2:
            try:
                entry["auc"] = 100.0 * auc(scores[:, 1], session.labels)
            except ValueError:
                entry["auc"] = None
        out.append(entry)
    return out


def _aggregate(cell: dict) -> None:
    accs = [r["accuracy"] for r in cell["runs"] if r.get("error") is None]
    cell["accuracy_mean"], cell["accuracy_std"] = mean_std(accs)
    aucs = [r.get("auc") for r in cell["runs"] if r.get("error") is None]
    if any(a is not None for a in aucs):
        cell["auc_mean"], cell["auc_std"] = mean_std(aucs)
    cell["n_failed"] = sum(1 for r in cell["runs"] if r.get("error") is not None)


def run_cell(config: ExperimentConfig, source: Domain, target: Domain, scenario: str, variant: str) -> dict:
    cell = {"scenario": scenario, "variant": variant, "runs": []}
    for seed in config.seeds:
        train_cfg = replace(config.train, scenario=scenario, seed=seed).with_ablation(variant)
        run: dict = {"seed": seed, "error": None}
        try:
            result = train_sdda(train_cfg, source, target)
            per_target = evaluate_network(result.student, target, train_cfg)
            run["targets"] = per_target
            run["accuracy"] = float(np.mean([t["accuracy"] for t in per_target]))
            aucs = [t.get("auc") for t in per_target]
            run["auc"] = float(np.mean(aucs)) if aucs and all(a is not None for a in aucs) else None
            if config.keep_histories:
                run["history"] = result.history.to_list()
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("cell %s/%s seed %d failed: %s", scenario, variant, seed, exc)
            run["error"] = f"{type(exc).__name__}: {exc}"
        cell["runs"].append(run)
    _aggregate(cell)
    return cell


def run_experiment(config_path: str | Path, out_dir: str | Path | None = None) -> ExperimentReport:
    """Run every (scenario, variant) cell over all seeds.

    Writes ``report.json`` (canonical, deterministic) and ``timing.json``
    (wall-clock, kept out of the report so reruns compare byte for byte)
    when ``out_dir`` is given.
    """
    config_path = Path(config_path)
    config = ExperimentConfig.from_dict(load_config_file(config_path))
    source, target = resolve_domains(config.data, config_path.parent)
    started = time.perf_counter()
    timings = {}
    cells = []
    for scenario in config.scenarios:
        for variant in config.variants:
            t0 = time.perf_counter()
            cells.append(run_cell(config, source, target, scenario, variant))
            timings[f"{scenario}/{variant}"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - started
    report = ExperimentReport(config.to_dict(), cells)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "report.json")
        (out / "timing.json").write_text(canonical_json({"wall_clock_seconds": timings}))
    return report
