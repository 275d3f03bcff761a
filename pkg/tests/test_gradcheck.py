import json

import numpy as np
import pytest

from src.core import numerics as nx
from src.core.gradcheck import (GradcheckReport, desk_config, op_cases, run_chain_check, run_gradcheck,
                                run_op_checks)


def _sigmoid_with_wrong_gradient(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return nx.custom_op("sigmoid", (x,), y, lambda g: (1.1 * g * y * (1.0 - y),))


def test_every_op_passes():
    checks = run_op_checks(instances=3)
    assert [c.name for c in checks] == list(op_cases())
    failed = [(c.name, c.max_rel_error, c.error) for c in checks if not c.passed]
    assert failed == []


def test_broken_gradient_is_caught(monkeypatch):
    monkeypatch.setattr(nx, "sigmoid", _sigmoid_with_wrong_gradient)
    report = GradcheckReport(ops=run_op_checks(instances=3, names=["sigmoid", "exp", "gelu", "vqa_surrogate_loss"]))
    assert report.failed_ops == ["sigmoid"]
    assert not report.passed
    assert report.to_dict()["failed"] == ["sigmoid"]


def test_chain_check_on_sampled_coordinates():
    checks = run_chain_check(desk_config(), max_coords=2)
    assert checks and all(c.coords <= 2 for c in checks)
    assert [c.name for c in checks if not c.passed] == []
    assert {c.group for c in checks} >= {"grounder.proj", "head.fc1"}


def test_report_schema(tmp_path):
    report = GradcheckReport(ops=run_op_checks(instances=1, names=["exp"]))
    path = report.save(str(tmp_path / "report.json"))
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    for key in ("passed", "ops", "parameter_groups", "parameters", "failed", "chain_error", "elapsed_seconds"):
        assert key in data
    assert data["passed"] is True and data["ops"][0]["name"] == "exp"


@pytest.mark.slow
def test_full_gradient_check():
    report = run_gradcheck()
    assert report.passed, report.to_dict()["failed"]
    assert all(c.coords <= 32 for c in report.params)
