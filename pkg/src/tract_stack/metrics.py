"""Dice score and per-subject evaluation reports."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from tract_stack.errors import PairingError, ShapeError
from tract_stack.volume_io import BinaryMask

RECORD_FIELDS = ("subject", "bundle", "method", "dice")


def _mask_array(mask: BinaryMask | np.ndarray) -> np.ndarray:
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    return data.astype(bool, copy=False)


def dice(a: BinaryMask | np.ndarray, b: BinaryMask | np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    x, y = _mask_array(a), _mask_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"dice needs matching dims, got {x.shape} and {y.shape}")
    total = int(np.count_nonzero(x)) + int(np.count_nonzero(y))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / total


def subject_sort_key(subject: str) -> tuple:
    """Natural ordering so subject_2 sorts before subject_10."""
    return tuple(int(part) if part.isdigit() else part for part in re.split(r"(\d+)", subject))


@dataclass(frozen=True)
class DiceEntry:
    subject: str
    bundle: str
    method: str
    dice: float

    def as_record(self) -> dict:
        return {"subject": self.subject, "bundle": self.bundle, "method": self.method, "dice": self.dice}


@dataclass(frozen=True)
class DiceReport:
    entries: tuple[DiceEntry, ...]
    mean: float
    std: float
    n: int

    @classmethod
    def from_entries(cls, entries: Iterable[DiceEntry]) -> "DiceReport":
        ordered = tuple(sorted(entries, key=lambda e: subject_sort_key(e.subject)))
        scores = np.array([e.dice for e in ordered], dtype=np.float64)
        if scores.size == 0:
            return cls(ordered, float("nan"), float("nan"), 0)
        # population standard deviation; n is reported alongside
        return cls(ordered, float(scores.mean()), float(scores.std()), int(scores.size))

    @property
    def method(self) -> str:
        return self.entries[0].method if self.entries else ""

    @property
    def bundle(self) -> str:
        return self.entries[0].bundle if self.entries else ""

    def records(self) -> list[dict]:
        return [e.as_record() for e in self.entries]


def evaluate(
    predictions: Sequence[tuple[str, BinaryMask]],
    references: Sequence[tuple[str, BinaryMask]],
    method: str,
    bundle: str,
) -> DiceReport:
    preds = dict(predictions)
    refs = dict(references)
    missing_pred = sorted(set(refs) - set(preds), key=subject_sort_key)
    missing_ref = sorted(set(preds) - set(refs), key=subject_sort_key)
    if missing_pred or missing_ref:
        parts = []
        if missing_pred:
            parts.append(f"no prediction for {', '.join(missing_pred)}")
        if missing_ref:
            parts.append(f"no reference for {', '.join(missing_ref)}")
        raise PairingError("; ".join(parts))
    return DiceReport.from_entries(
        DiceEntry(subject, bundle, method, dice(preds[subject], refs[subject])) for subject in refs
    )


def compare(reports: Sequence[DiceReport]) -> list[dict]:
    """Concatenate several reports into one record list (method column kept)."""
    records: list[dict] = []
    for report in reports:
        records.extend(report.records())
    return records
