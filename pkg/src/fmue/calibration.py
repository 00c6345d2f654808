"""Validation-set search for the uncertainty referral threshold.

Samples are excluded from the most uncertain downward. Equal uncertainties
form an atomic block (a threshold rule cannot separate them, so calibration
must not either). The search stops before the first block whose exclusion
would push accuracy or disease incidence strictly below the reference level,
or when fewer than two samples would remain.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np


@dataclasses.dataclass(frozen=True)
class CalibrationInput:
    uncertainties: np.ndarray
    correct: np.ndarray
    abnormal: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.uncertainties, dtype=np.float64)
        c = np.asarray(self.correct, dtype=bool)
        a = np.asarray(self.abnormal, dtype=bool)
        if u.ndim != 1 or len(u) < 1:
            raise ValueError("need at least one sample")
        if len(u) != len(c) or len(u) != len(a):
            raise ValueError("uncertainties, correct, abnormal must have equal length")
        if (u <= 0).any() or (u > 1).any():
            raise ValueError("uncertainties must lie in (0, 1]")
        object.__setattr__(self, "uncertainties", u)
        object.__setattr__(self, "correct", c)
        object.__setattr__(self, "abnormal", a)

    def __len__(self) -> int:
        return len(self.uncertainties)


@dataclasses.dataclass
class CalibrationReport:
    theta: float
    excluded_count: int
    accuracy_trace: list
    incidence_trace: list
    stop_reason: str
    initial_accuracy: float
    initial_incidence: float
    excluded_indices: list

    def to_json(self) -> dict:
        return {
            "theta": self.theta,
            "excluded_count": self.excluded_count,
            "accuracy_trace": self.accuracy_trace,
            "incidence_trace": self.incidence_trace,
            "stop_reason": self.stop_reason,
            "initial_accuracy": self.initial_accuracy,
            "initial_incidence": self.initial_incidence,
            "excluded_indices": self.excluded_indices,
        }

    @staticmethod
    def from_json(data: dict) -> "CalibrationReport":
        return CalibrationReport(
            theta=float(data["theta"]),
            excluded_count=int(data["excluded_count"]),
            accuracy_trace=list(data["accuracy_trace"]),
            incidence_trace=list(data["incidence_trace"]),
            stop_reason=str(data["stop_reason"]),
            initial_accuracy=float(data["initial_accuracy"]),
            initial_incidence=float(data["initial_incidence"]),
            excluded_indices=list(data["excluded_indices"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "CalibrationReport":
        with open(path) as fh:
            return CalibrationReport.from_json(json.load(fh))


def _tie_blocks(order, u):
    """Split a descending-u index order into runs of equal uncertainty."""
    blocks = []
    start = 0
    for i in range(1, len(order) + 1):
        if i == len(order) or u[order[i]] != u[order[start]]:
            blocks.append(order[start:i])
            start = i
    return blocks


def calibrate_threshold(
    inp: CalibrationInput, compare_to: str = "initial"
) -> CalibrationReport:
    """Run the exclusion search and return the threshold with its full trace.

    ``compare_to`` selects the reference the indicators are checked against:
    the full-set values ("initial", default) or the values after the previous
    committed exclusion ("previous").
    """
    if compare_to not in ("initial", "previous"):
        raise ValueError("compare_to must be 'initial' or 'previous'")
    n = len(inp)
    u = inp.uncertainties
    correct_total = int(inp.correct.sum())
    abnormal_total = int(inp.abnormal.sum())

    initial_accuracy = correct_total / n
    initial_incidence = abnormal_total / n
    accuracy_trace = [initial_accuracy]
    incidence_trace = [initial_incidence]

    order = sorted(range(n), key=lambda i: (-u[i], i))
    blocks = _tie_blocks(order, u)

    remaining = n
    correct_left = correct_total
    abnormal_left = abnormal_total
    ref_accuracy = initial_accuracy
    ref_incidence = initial_incidence
    excluded = []
    theta = 1.0
    stop_reason = "exhausted"

    for block in blocks:
        size = len(block)
        if remaining - size < 1:
            stop_reason = "exhausted"
            break
        block_correct = int(inp.correct[block].sum())
        block_abnormal = int(inp.abnormal[block].sum())
        new_accuracy = (correct_left - block_correct) / (remaining - size)
        new_incidence = (abnormal_left - block_abnormal) / (remaining - size)
        if new_accuracy < ref_accuracy:
            stop_reason = "accuracy_drop"
            break
        if new_incidence < ref_incidence:
            stop_reason = "incidence_drop"
            break
        if remaining - size == 1:
            stop_reason = "exhausted"
            break
        # commit: record per-sample values after each removal within the block
        for idx in block:
            remaining -= 1
            correct_left -= int(inp.correct[idx])
            abnormal_left -= int(inp.abnormal[idx])
            accuracy_trace.append(correct_left / remaining)
            incidence_trace.append(abnormal_left / remaining)
            excluded.append(idx)
        theta = float(u[block[0]])
        if compare_to == "previous":
            ref_accuracy = new_accuracy
            ref_incidence = new_incidence

    return CalibrationReport(
        theta=theta if excluded else 1.0,
        excluded_count=len(excluded),
        accuracy_trace=accuracy_trace,
        incidence_trace=incidence_trace,
        stop_reason=stop_reason,
        initial_accuracy=initial_accuracy,
        initial_incidence=initial_incidence,
        excluded_indices=excluded,
    )
