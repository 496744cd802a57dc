"""Counting evaluation: aggregate errors and diagnostic splits.

Per-image results are ``EvalRecord`` rows (also serialized as CSV with
the header ``id,pred_count,gt_count,occlusion_level,crowding_level``).
Besides plain MAE/RMSE the module can split records by occlusion level
or crowding, decompose a prediction's error into background and
foreground parts against a ground-truth mask, and run the
oracle-masking probe (how much better would the model count if the
background were blanked for it?).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from collections.abc import Callable, Sequence

import numpy as np

from .errors import (
    EmptySetError,
    MalformedFileError,
    ShapeMismatchError,
    TooFewRecordsError,
)

OCCLUSION_THRESHOLD = 1.5

CSV_HEADER = ["id", "pred_count", "gt_count", "occlusion_level", "crowding_level"]


@dataclass(frozen=True)
class EvalRecord:
    """One image's counting outcome plus its difficulty coordinates."""

    id: str
    pred_count: float
    gt_count: float
    occlusion_level: float
    crowding_level: float


def mae_rmse(records: Sequence[EvalRecord]) -> tuple[float, float]:
    """Mean absolute and root-mean-square count error."""
    if not records:
        raise EmptySetError("no records to aggregate")
    errs = np.array([r.pred_count - r.gt_count for r in records], dtype=np.float64)
    return float(np.abs(errs).mean()), float(math.sqrt((errs * errs).mean()))


def occlusion_split(
    records: Sequence[EvalRecord], threshold: float = OCCLUSION_THRESHOLD
) -> tuple[list[EvalRecord], list[EvalRecord]]:
    """Split into (low, high) occlusion; low is strictly below the threshold."""
    low = [r for r in records if r.occlusion_level < threshold]
    high = [r for r in records if r.occlusion_level >= threshold]
    return low, high


def crowding_split(
    records: Sequence[EvalRecord],
) -> tuple[list[EvalRecord], list[EvalRecord], list[EvalRecord]]:
    """Thirds by ascending crowding level: (sparse, medium, dense).

    With n not divisible by 3 the earlier groups take the extra rows:
    sizes are ceil(n/3), then ceil of half the rest, then the rest.
    Ties keep their input order (the sort is stable).
    """
    rows = list(records)
    n = len(rows)
    if n < 3:
        raise TooFewRecordsError(f"crowding split needs >= 3 records, got {n}")
    rows.sort(key=lambda r: r.crowding_level)
    s1 = math.ceil(n / 3)
    s2 = math.ceil((n - s1) / 2)
    return rows[:s1], rows[s1 : s1 + s2], rows[s1 + s2 :]


def bg_fg_error(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Split a map's count error by the ground-truth foreground mask.

    Background error is the (absolute) predicted mass off-mask; the
    ground truth is compared on the foreground side in full, so any of
    its residual off-mask tail mass counts against the foreground term:
    ``fg_err = |sum(pred on mask) - sum(gt)|``.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if p.shape != g.shape or p.shape != m.shape:
        raise ShapeMismatchError(f"pred {p.shape}, gt {g.shape}, mask {m.shape}")
    on = m != 0.0
    bg_err = abs(float(p[~on].sum()))
    fg_err = abs(float(p[on].sum()) - float(g.sum()))
    return bg_err, fg_err


def oracle_mask_eval(
    predict: Callable[[np.ndarray], float],
    samples: Sequence[tuple[np.ndarray, np.ndarray, float]],
) -> tuple[float, float]:
    """Counting MAE of ``predict`` on raw vs. mask-premultiplied inputs.

    ``samples`` are ``(input_image, gt_mask, gt_count)`` triples, the
    image already in the model's input scale. Returns
    ``(mae_plain, mae_masked)``.
    """
    if not samples:
        raise EmptySetError("no samples to evaluate")
    err_plain = []
    err_masked = []
    for image, mask, gt_count in samples:
        img = np.asarray(image, dtype=np.float64)
        msk = np.asarray(mask, dtype=np.float64)
        if img.shape != msk.shape:
            raise ShapeMismatchError(f"image {img.shape} vs mask {msk.shape}")
        err_plain.append(abs(float(predict(img)) - gt_count))
        err_masked.append(abs(float(predict(img * msk)) - gt_count))
    return float(np.mean(err_plain)), float(np.mean(err_masked))


def write_records(path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.id, repr(r.pred_count), repr(r.gt_count), repr(r.occlusion_level), repr(r.crowding_level)]
            )


def read_records(path) -> list[EvalRecord]:
    try:
        with open(path, "r", encoding="ascii", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise MalformedFileError(f"cannot read records file {path}: {exc}") from exc
    if not rows or rows[0] != CSV_HEADER:
        raise MalformedFileError(f"records file must start with header {','.join(CSV_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise MalformedFileError(f"line {lineno}: expected {len(CSV_HEADER)} fields")
        try:
            records.append(
                EvalRecord(row[0], float(row[1]), float(row[2]), float(row[3]), float(row[4]))
            )
        except ValueError as exc:
            raise MalformedFileError(f"line {lineno}: bad number: {exc}") from exc
    return records
