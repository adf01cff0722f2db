"""Python front end for the neuroadapt C++ core."""

import json as _json

from ._neuroadapt import (
    AdaptationError,
    ConfigError,
    ContractError,
    DataError,
    Error,
    IoError,
    ReportError,
    ShapeError,
    UndefinedMetricError,
    __version__,
    aggregate,
    class_metrics,
    format_signed,
    pr_auc,
    rng_u64,
    roc_auc,
    selftest,
)
from . import _neuroadapt as _core


def suite_preset(kind):
    return _json.loads(_core.suite_preset(kind))


def generate_suite(spec, out_dir):
    """Writes source and target datasets; returns their manifest paths."""
    return _core.generate_suite(_json.dumps(spec), str(out_dir))


def run_experiment(plan, resume=False, threads=0):
    return _core.run_experiment(_json.dumps(plan), resume, threads)


def report(runs_path, mode="pooled", out_dir=""):
    return _json.loads(_core.report(str(runs_path), mode, str(out_dir)))


__all__ = [
    "AdaptationError",
    "ConfigError",
    "ContractError",
    "DataError",
    "Error",
    "IoError",
    "ReportError",
    "ShapeError",
    "UndefinedMetricError",
    "__version__",
    "aggregate",
    "class_metrics",
    "format_signed",
    "generate_suite",
    "pr_auc",
    "report",
    "rng_u64",
    "roc_auc",
    "run_experiment",
    "selftest",
    "suite_preset",
]
