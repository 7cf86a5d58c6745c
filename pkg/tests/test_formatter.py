import json

import pytest

from tract_stack.formatter import (
    format_comparison,
    format_gradcheck,
    format_history,
    format_report,
)
from tract_stack.gradcheck import CheckResult
from tract_stack.metrics import DiceEntry, DiceReport
from tract_stack.train import EpochRecord


def _report(method="stacked"):
    return DiceReport.from_entries(
        [DiceEntry("s_1", "arc", method, 0.9), DiceEntry("s_2", "arc", method, 0.7)]
    )


# --- format_history ---


def test_history_table():
    records = [EpochRecord(0, 0.51234, 0.25, 0.002, 9.0), EpochRecord(1, 0.4, 0.5, 0.00194, 1.0)]
    out = format_history(records)
    lines = out.splitlines()
    assert lines[0].split() == ["Epoch", "Train", "Loss", "Val", "Dice", "LR", "FG", "Weight"]
    assert set(lines[1].replace(" ", "")) == {"-"}
    assert "0.51234" in lines[2]
    assert "0.00194" in lines[3]


def test_history_json():
    out = json.loads(format_history([EpochRecord(0, 0.5, 0.25, 0.002, 9.0)], as_json=True))
    assert out == [{"epoch": 0, "train_loss": 0.5, "val_dice": 0.25, "lr": 0.002, "fg_weight": 9.0}]


def test_history_empty():
    assert format_history([]) == "No epochs recorded."


# --- format_report ---


def test_report_table_and_summary():
    out = format_report(_report())
    assert "s_1" in out and "0.9000" in out
    assert out.splitlines()[-1] == "mean 0.8000 ± 0.1000 (n=2)"


def test_report_json():
    data = json.loads(format_report(_report(), as_json=True))
    assert data["n"] == 2
    assert data["entries"][1]["subject"] == "s_2"


def test_report_empty():
    assert format_report(DiceReport.from_entries([])) == "No subjects evaluated."


# --- format_comparison / format_gradcheck ---


def test_comparison_rows_per_method():
    out = format_comparison([_report("stacked"), _report("xy")])
    lines = out.splitlines()
    assert len(lines) == 4
    assert lines[2].startswith("stacked")
    assert lines[3].startswith("xy")


def test_comparison_json():
    [row] = json.loads(format_comparison([_report()], as_json=True))
    assert (row["method"], row["bundle"], row["n"]) == ("stacked", "arc", 2)
    assert row["mean"] == pytest.approx(0.8)
    assert row["std"] == pytest.approx(0.1)


def test_gradcheck_status_column():
    results = [
        CheckResult("conv2d", 1e-6, 1e-3, ((1, 2, 3, 3),)),
        CheckResult("relu", 0.5, 1e-3, ((1, 2, 3, 3),)),
    ]
    lines = format_gradcheck(results).splitlines()
    assert lines[2].endswith("ok")
    assert lines[3].endswith("FAIL")
