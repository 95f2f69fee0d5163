import json
import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

import oracles
from sdda.data import SynthSpec, save_dataset, synth_generate
from sdda.evaluation import (
    DESIGN_FLAGS,
    ExperimentConfig,
    ExperimentReport,
    accuracy,
    auc,
    auc_pairwise,
    canonical_json,
    mean_std,
    run_experiment,
)

TINY_TRAIN = {
    "epochs": 1,
    "batch_size": 8,
    "n_labeled": 8,
    "track_target_accuracy": False,
    "arch": {"f1": 2, "depth_multiplier": 2, "f2": 3, "temporal_kernel": 5, "separable_kernel": 3, "pool1": 2, "pool2": 2},
}
TINY_SYNTH = {"trials_per_class": 6, "target_trials_per_class": 12, "n_samples": 32}


def write_config(tmp_path, **overrides):
    raw = {"data": {"synth": TINY_SYNTH}, "train": TINY_TRAIN, "seeds": [0], "keep_histories": True} | overrides
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


# -- accuracy ------------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 100.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 75.0


def test_accuracy_errors():
    with pytest.raises(ValueError, match="empty"):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_accuracy_plus_error_rate_is_100(pairs):
    pred, true = zip(*pairs)
    correct = sum(p == t for p, t in pairs)
    err = 100.0 * (len(pairs) - correct) / len(pairs)
    assert accuracy(pred, true) + err == 100.0
    assert accuracy(pred, true) == 100.0 * correct / len(pairs)


# -- auc ---------------------------------------------------------------------------------


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    assert auc_pairwise([0.5, 0.5], [1, 0]) == 0.5


def test_auc_errors():
    with pytest.raises(ValueError, match="both classes"):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError, match="binary"):
        auc([0.1, 0.2], [0, 2])


def test_auc_matches_brute_force_on_200_instances():
    r = np.random.default_rng(99)
    for _ in range(200):
        n = int(r.integers(2, 51))
        labels = r.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = r.integers(0, 6, n) / 5.0 if r.random() < 0.5 else r.random(n)
        expected = oracles.auc_pairs(scores.tolist(), labels.tolist())
        assert abs(auc(scores, labels) - expected) <= 1e-12
        assert abs(auc_pairwise(scores, labels) - expected) <= 1e-12


@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_label_flip_symmetry(pairs):
    scores, labels = map(np.array, zip(*pairs))
    if labels.min() == labels.max():
        return
    assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)
    assert auc(-scores, labels) == pytest.approx(1 - auc(scores, labels), abs=1e-12)


# -- serialization -------------------------------------------------------------------------


def test_canonical_json_layout():
    text = canonical_json({"b": [1, 2.5, None], "a": {"y": True, "x": 1 / 3}, "c": float("nan")})
    assert text == (
        '{\n  "a": {\n    "x": 0.3333333333,\n    "y": true\n  },\n'
        '  "b": [\n    1,\n    2.5,\n    null\n  ],\n  "c": null\n}\n'
    )


@given(
    st.recursive(
        st.none() | st.booleans() | st.integers(-10**6, 10**6) | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=5),
        lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=4), inner, max_size=4),
        max_leaves=15,
    )
)
@example(1.7976931345e308)
def test_canonical_json_reserializes_identically(obj):
    text = canonical_json(obj)
    assert canonical_json(json.loads(text)) == text


def test_mean_std_population_and_missing():
    mean, std = mean_std([1.0, 2.0, 3.0, None])
    assert mean == 2.0 and std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert all(math.isnan(v) for v in mean_std([None]))


# -- config -----------------------------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="colour"):
        ExperimentConfig.from_dict({"data": {"synth": {}}, "colour": 1})
    with pytest.raises(ValueError, match="snrr"):
        ExperimentConfig.from_dict({"data": {"synth": {"snrr": 1}}})
    with pytest.raises(ValueError, match="epoch"):
        ExperimentConfig.from_dict({"data": {"synth": {}}, "train": {"epoch": 3}})
    with pytest.raises(ValueError, match="variants"):
        ExperimentConfig.from_dict({"data": {"synth": {}}, "variants": ["CE+XX"]})
    with pytest.raises(ValueError, match="data"):
        ExperimentConfig.from_dict({"data": {"source": "a.sdda"}})


def test_config_dict_round_trip():
    cfg = ExperimentConfig.from_dict({"data": {"synth": TINY_SYNTH}, "train": TINY_TRAIN, "variants": ["CE", "SDDA"]})
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- experiments ----------------------------------------------------------------------------------


def test_one_seed_one_variant_gives_one_cell(tmp_path):
    report = run_experiment(write_config(tmp_path), tmp_path / "out")
    assert len(report.cells) == 1
    cell = report.cells[0]
    assert (cell["scenario"], cell["variant"], cell["n_failed"]) == ("uda", "SDDA", 0)
    run = cell["runs"][0]
    assert 0 <= run["accuracy"] <= 100 and 0 <= run["auc"] <= 100
    assert len(run["history"]) == 1
    assert cell["accuracy_std"] == 0.0
    assert report.design_flags == DESIGN_FLAGS
    assert (tmp_path / "out" / "report.json").exists()
    timing = json.loads((tmp_path / "out" / "timing.json").read_text())
    assert timing["wall_clock_seconds"]["total"] > 0


def test_aggregates_match_recomputation(tmp_path):
    path = write_config(tmp_path, seeds=[0, 1, 2, 3, 4], variants=["CE", "SDDA"], scenarios=["uda", "sda"], keep_histories=False)
    report = run_experiment(path)
    assert len(report.cells) == 4
    for cell in report.cells:
        accs = [r["accuracy"] for r in cell["runs"]]
        assert len(accs) == 5
        mean = sum(accs) / 5
        std = math.sqrt(sum((a - mean) ** 2 for a in accs) / 5)
        assert cell["accuracy_mean"] == pytest.approx(mean, abs=1e-12)
        assert cell["accuracy_std"] == pytest.approx(std, abs=1e-12)
        aucs = [r["auc"] for r in cell["runs"]]
        assert cell["auc_mean"] == pytest.approx(sum(aucs) / 5, abs=1e-12)
    sda_runs = [r for c in report.cells if c["scenario"] == "sda" for r in c["runs"]]
    assert all(r["targets"][0]["n_trials"] == 24 - 8 for r in sda_runs)


def test_identical_config_gives_byte_identical_report(tmp_path):
    path = write_config(tmp_path, variants=["CE+MA", "SDDA"])
    run_experiment(path, tmp_path / "a")
    run_experiment(path, tmp_path / "b")
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    parsed = ExperimentReport.loads(a.decode())
    assert parsed.dumps().encode() == a


def test_failing_cell_is_recorded_and_others_continue(tmp_path):
    # n_labeled larger than the target session: SDA fails, UDA still runs
    train = TINY_TRAIN | {"n_labeled": 100}
    report = run_experiment(write_config(tmp_path, train=train, scenarios=["sda", "uda"], seeds=[0, 1]))
    sda, uda = report.cells
    assert sda["n_failed"] == 2 and all("n_labeled" in r["error"] for r in sda["runs"])
    assert math.isnan(sda["accuracy_mean"])
    assert uda["n_failed"] == 0 and not math.isnan(uda["accuracy_mean"])
    assert "null" in report.dumps()


def test_dataset_paths_resolve_relative_to_config(tmp_path):
    source, target = synth_generate(SynthSpec(**TINY_SYNTH))
    save_dataset(source, tmp_path / "src.sdda")
    save_dataset(target, tmp_path / "tgt.sdda")
    from_files = run_experiment(write_config(tmp_path, data={"source": "src.sdda", "target": "tgt.sdda"}))
    from_synth = run_experiment(write_config(tmp_path))
    assert from_files.cells == from_synth.cells
