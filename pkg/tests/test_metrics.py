import math

import numpy as np
import pytest

from tract_stack.errors import PairingError, ShapeError
from tract_stack.metrics import (
    DiceEntry,
    DiceReport,
    compare,
    dice,
    evaluate,
    subject_sort_key,
)
from tract_stack.volume_io import BinaryMask


def _mask(values):
    return BinaryMask(np.array(values, dtype=np.uint8).reshape(1, 1, -1))


# --- dice ---


def test_dice_known_value():
    assert dice(_mask([1, 1, 0, 0]), _mask([1, 0, 1, 0])) == pytest.approx(0.5)


def test_dice_identical_and_disjoint():
    a = _mask([1, 0, 1, 0])
    assert dice(a, a) == 1.0
    assert dice(a, _mask([0, 1, 0, 1])) == 0.0


def test_dice_both_empty_is_one():
    assert dice(_mask([0, 0, 0]), _mask([0, 0, 0])) == 1.0


def test_dice_one_empty_is_zero():
    assert dice(_mask([0, 0, 0]), _mask([0, 1, 0])) == 0.0


def test_dice_is_symmetric():
    rng = np.random.default_rng(0)
    a = rng.random((5, 5, 5)) < 0.3
    b = rng.random((5, 5, 5)) < 0.3
    assert dice(a, b) == dice(b, a)


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# --- reports ---


def test_subject_sort_is_natural():
    subjects = ["subject_10", "subject_2", "subject_1"]
    assert sorted(subjects, key=subject_sort_key) == ["subject_1", "subject_2", "subject_10"]


def test_evaluate_report():
    refs = [("s_2", _mask([1, 1, 0, 0])), ("s_1", _mask([1, 0, 0, 0]))]
    preds = [("s_1", _mask([1, 0, 0, 0])), ("s_2", _mask([1, 0, 1, 0]))]

    report = evaluate(preds, refs, method="stacked", bundle="arc")

    assert [e.subject for e in report.entries] == ["s_1", "s_2"]
    assert report.mean == pytest.approx(0.75)
    assert report.std == pytest.approx(0.25)
    assert report.n == 2
    assert report.method == "stacked"
    assert report.records()[0] == {"subject": "s_1", "bundle": "arc", "method": "stacked", "dice": 1.0}


def test_evaluate_missing_pairs():
    refs = [("s_1", _mask([1])), ("s_2", _mask([1]))]
    preds = [("s_1", _mask([1])), ("s_3", _mask([1]))]
    with pytest.raises(PairingError, match="no prediction for s_2; no reference for s_3"):
        evaluate(preds, refs, method="m", bundle="b")


def test_empty_report():
    report = DiceReport.from_entries([])
    assert report.n == 0
    assert math.isnan(report.mean)
    assert report.method == ""


def test_compare_keeps_method_column():
    a = DiceReport.from_entries([DiceEntry("s_1", "arc", "stacked", 0.9)])
    b = DiceReport.from_entries([DiceEntry("s_1", "arc", "xy", 0.8)])
    assert [r["method"] for r in compare([a, b])] == ["stacked", "xy"]
