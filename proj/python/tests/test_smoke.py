import math

import pytest

import neuroadapt as na


def test_version():
    assert na.__version__ == "0.1.0"


def test_rng_reference_values():
    assert na.rng_u64(0, 2) == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]


def test_metrics_examples():
    assert na.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert math.isclose(na.pr_auc([0.9, 0.8, 0.7], [1, 0, 1]), 0.5 + 0.5 * 2 / 3, rel_tol=1e-12)
    m = na.class_metrics([0, 0, 1, 1], [0, 1, 1, 1])
    assert m["balanced_accuracy"] == 0.75
    with pytest.raises(na.UndefinedMetricError):
        na.roc_auc([0.1, 0.2], [1, 1])


def test_aggregate_and_format():
    mean, sd, n = na.aggregate([0.1, 0.2, 0.3])
    assert n == 3
    assert math.isclose(mean, 0.2) and math.isclose(sd, 0.1)
    assert na.format_signed(0.187, 0.035) == "+0.187 ± 0.035"
    assert na.format_signed(-0.0, 0.0) == "+0.000 ± 0.000"


def test_config_errors_surface_as_python_exceptions(tmp_path):
    with pytest.raises(na.ConfigError, match=r"\$\.methods: empty method list"):
        na.run_experiment({"suites": [na.suite_preset("label_shift")], "methods": []})


def test_end_to_end(tmp_path):
    suite = na.suite_preset("label_shift")
    suite.update(name="ls", train_records=200, val_records=60, test_records=128)
    src, tgt = na.generate_suite(suite, tmp_path / "data")
    assert src.endswith(".json") and tgt.endswith(".json")

    plan = {
        "output_dir": str(tmp_path / "runs"),
        "seeds": [0],
        "batch_sizes": [64],
        "suites": [suite],
        "finetune": {"epochs": 2},
        "methods": ["tent", "shot", "t3a"],
    }
    s = na.run_experiment(plan, threads=1)
    assert s["written"] == 4 and s["failed"] == 0
    rep = na.report(s["runs_path"], out_dir=tmp_path / "report")
    methods = {row["method"] for row in rep["deltas"]}
    assert {"tent", "shot", "t3a"} <= methods
    assert (tmp_path / "report" / "deltas.csv").exists()
    assert na.run_experiment(plan, resume=True, threads=1)["written"] == 0
