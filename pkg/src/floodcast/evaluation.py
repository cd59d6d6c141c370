"""Imbalanced-classification evaluation: confusion counts, accuracy,
precision/recall, F-measure with critical-threshold search, precision-recall
curves with area, and the Monte-Carlo weight sweep that trains repeated
models per loss weight and aggregates their scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Rng
from .errors import (
    ContractError,
    DivergenceError,
    NoPositivesError,
    NumericError,
    UndefinedMetricError,
)
from . import model as model_mod


def default_threshold_grid() -> np.ndarray:
    """Thresholds 0.00 to 1.00 in steps of 0.01 (101 points)."""
    return np.array([i / 100 for i in range(101)])


def paper_weight_grid() -> list[float]:
    """Weights 1..10 step 1, then 15..100 step 5 (28 values)."""
    return [float(w) for w in range(1, 11)] + [float(w) for w in range(15, 101, 5)]


def extended_weight_grid() -> list[float]:
    """The 28-value grid plus the sub-unit weights 0.1 and 0.5."""
    return [0.1, 0.5] + paper_weight_grid()


# =====================================================================
# Point metrics
# =====================================================================

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_at(scores, labels, phi: float) -> ConfusionMatrix:
    """Counts with the decision rule: predict flooded iff score > phi."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(
            f"confusion_at: scores {scores.shape} vs labels {labels.shape}")
    predicted = scores > phi
    actual = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
        tn=int(np.sum(~predicted & ~actual)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def precision_recall(cm: ConfusionMatrix) -> tuple[float, float]:
    """Precision and recall, both 0 by convention when their denominator is 0."""
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp > 0 else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn > 0 else 0.0
    return precision, recall


def f_measure(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# =====================================================================
# Curves
# =====================================================================

@dataclass
class PRCurve:
    thresholds: np.ndarray
    precisions: np.ndarray
    recalls: np.ndarray
    area: float
    baseline: float  # no-skill precision = positives / total


@dataclass
class FCurve:
    thresholds: np.ndarray
    f_values: np.ndarray
    phi_c: float
    f_max: float
    area: float


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(0.5 * ((y[1:] + y[:-1]) * (x[1:] - x[:-1])).sum())


def _pr_area(precisions, recalls, predicted_any) -> float:
    """Trapezoidal area over recall.

    Grid points that predict no positives have no defined precision (the
    listed 0 is a bookkeeping convention), so they are excluded here; the
    curve is anchored at recall 0 with the precision of its lowest-recall
    point. Duplicate-recall points are averaged in precision.
    """
    recalls = recalls[predicted_any]
    precisions = precisions[predicted_any]
    if recalls.size == 0:
        return 0.0
    by_recall: dict[float, list[float]] = {}
    for r, p in zip(recalls, precisions):
        by_recall.setdefault(float(r), []).append(float(p))
    points = sorted((r, sum(ps) / len(ps)) for r, ps in by_recall.items())
    if points[0][0] > 0.0:
        points.insert(0, (0.0, points[0][1]))
    xs = np.array([r for r, _ in points])
    ys = np.array([p for _, p in points])
    return _trapezoid(ys, xs)


def pr_curve(scores, labels, grid: np.ndarray | None = None) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if grid is None:
        grid = default_threshold_grid()
    positives = int(np.sum(labels == 1))
    if positives == 0:
        raise NoPositivesError("precision-recall curve needs at least one positive label")

    precisions = np.empty(len(grid))
    recalls = np.empty(len(grid))
    predicted_any = np.empty(len(grid), dtype=bool)
    for i, phi in enumerate(grid):
        cm = confusion_at(scores, labels, phi)
        precisions[i], recalls[i] = precision_recall(cm)
        predicted_any[i] = cm.tp + cm.fp > 0
    return PRCurve(
        thresholds=np.asarray(grid, dtype=np.float64),
        precisions=precisions,
        recalls=recalls,
        area=_pr_area(precisions, recalls, predicted_any),
        baseline=positives / len(labels),
    )


def f_curve_and_critical(scores, labels, grid: np.ndarray | None = None) -> FCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if grid is None:
        grid = default_threshold_grid()
    if int(np.sum(labels == 1)) == 0:
        raise NoPositivesError("F-measure curve needs at least one positive label")

    grid = np.asarray(grid, dtype=np.float64)
    f_values = np.empty(len(grid))
    for i, phi in enumerate(grid):
        f_values[i] = f_measure(*precision_recall(confusion_at(scores, labels, phi)))
    best = int(np.argmax(f_values))  # first max: ties break to the smallest phi
    return FCurve(
        thresholds=grid,
        f_values=f_values,
        phi_c=float(grid[best]),
        f_max=float(f_values[best]),
        area=_trapezoid(f_values, grid),
    )


def max_accuracy(scores, labels, grid: np.ndarray | None = None) -> float:
    """Best accuracy over the threshold grid (Table-4-style column)."""
    if grid is None:
        grid = default_threshold_grid()
    return max(accuracy(confusion_at(scores, labels, phi)) for phi in grid)


# =====================================================================
# Monte-Carlo weight sweep
# =====================================================================

@dataclass
class SweepRun:
    weight: float
    run_index: int
    seed: int
    max_f: float = math.nan
    phi_c: float = math.nan
    f_area: float = math.nan
    pr_area: float = math.nan
    precision_at_half: float = math.nan
    recall_at_half: float = math.nan
    accuracy_at_half: float = math.nan
    accuracy_at_phi_c: float = math.nan
    epochs: int = 0
    seconds_per_epoch: float = math.nan
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class SweepRow:
    weight: float
    mean_max_f: float
    mean_f_area: float
    mean_pr_area: float
    succeeded: int
    failed: bool


@dataclass
class SweepReport:
    rows: list[SweepRow]
    runs: list[SweepRun]
    runs_per_weight: int
    best_weight: float | None
    best_phi_c: float | None


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else math.nan


def _lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def evaluate_scores(run: SweepRun, scores: np.ndarray, labels: np.ndarray,
                    grid: np.ndarray | None = None) -> None:
    """Fill a sweep-run record from held-out scores."""
    fc = f_curve_and_critical(scores, labels, grid)
    pc = pr_curve(scores, labels, grid)
    cm_half = confusion_at(scores, labels, 0.5)
    p_half, r_half = precision_recall(cm_half)
    run.max_f = fc.f_max
    run.phi_c = fc.phi_c
    run.f_area = fc.area
    run.pr_area = pc.area
    run.precision_at_half = p_half
    run.recall_at_half = r_half
    run.accuracy_at_half = accuracy(cm_half)
    run.accuracy_at_phi_c = accuracy(confusion_at(scores, labels, fc.phi_c))


def monte_carlo_sweep(config: "model_mod.ModelConfig",
                      train_xy: tuple[np.ndarray, np.ndarray],
                      val_xy: tuple[np.ndarray, np.ndarray],
                      test_xy: tuple[np.ndarray, np.ndarray],
                      weights: Sequence[float],
                      runs: int = 10) -> SweepReport:
    """Train ``runs`` models per weight with derived seeds, score the test
    set, and aggregate mean max-F, F-curve area, and PR area per weight.

    Training failures are recorded per run without aborting the sweep; a
    weight whose runs all failed is flagged in its row. The best weight is
    the highest mean max-F, ties going to the smaller weight.
    """
    if len(weights) == 0:
        raise ContractError("sweep needs a non-empty weight list")
    if runs < 1:
        raise ContractError("sweep needs at least one run per weight")

    x_test, y_test = np.asarray(test_xy[0]), np.asarray(test_xy[1])
    base = Rng(config.seed)
    all_runs: list[SweepRun] = []
    rows: list[SweepRow] = []
    for weight in weights:
        weight = float(weight)
        weight_runs: list[SweepRun] = []
        for run_index in range(runs):
            seed = base.split("sweep", weight, run_index).seed
            record = SweepRun(weight=weight, run_index=run_index, seed=seed)
            run_config = replace(config, loss_weight=weight, seed=seed)
            try:
                params, report = model_mod.train(run_config, train_xy, val_xy)
                scores = model_mod.predict_probabilities(params, run_config, x_test)
                evaluate_scores(record, scores, y_test)
                record.epochs = report.stopped_epoch
                record.seconds_per_epoch = _mean(report.epoch_seconds)
            except (DivergenceError, NumericError, FloatingPointError) as exc:
                record.error = str(exc)
            weight_runs.append(record)
        ok = [r for r in weight_runs if not r.failed]
        rows.append(SweepRow(
            weight=weight,
            mean_max_f=_mean([r.max_f for r in ok]),
            mean_f_area=_mean([r.f_area for r in ok]),
            mean_pr_area=_mean([r.pr_area for r in ok]),
            succeeded=len(ok),
            failed=len(ok) == 0,
        ))
        all_runs.extend(weight_runs)

    viable = [row for row in rows if not row.failed]
    best_weight = None
    best_phi_c = None
    if viable:
        best = min(viable, key=lambda row: (-row.mean_max_f, row.weight))
        best_weight = best.weight
        best_phi_c = _lower_median(
            [r.phi_c for r in all_runs if r.weight == best.weight and not r.failed])
    return SweepReport(rows=rows, runs=all_runs, runs_per_weight=runs,
                       best_weight=best_weight, best_phi_c=best_phi_c)


# =====================================================================
# Report emission
# =====================================================================

def _write_table(path, header: list[str], rows: list[list], comment: str | None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(cell) for cell in row) + "\n")


def _format_cell(cell) -> str:
    if isinstance(cell, float):
        return repr(cell)
    return str(cell)


def write_sweep_summary_csv(report: SweepReport, path, comment: str | None = None) -> None:
    """One row per weight, mirroring the weight/max-F/F-area/PR-area table."""
    header = ["weight", "max_f_measure", "f_measure_curve_area",
              "pr_curve_area", "runs_succeeded"]
    rows = [[row.weight, row.mean_max_f, row.mean_f_area, row.mean_pr_area,
             row.succeeded] for row in report.rows]
    _write_table(path, header, rows, comment)


def write_sweep_runs_csv(report: SweepReport, path, comment: str | None = None) -> None:
    header = ["weight", "run", "seed", "max_f_measure", "phi_c",
              "f_measure_curve_area", "pr_curve_area", "precision_at_0.5",
              "recall_at_0.5", "accuracy_at_0.5", "accuracy_at_phi_c",
              "epochs", "seconds_per_epoch", "error"]
    rows = [[r.weight, r.run_index, r.seed, r.max_f, r.phi_c, r.f_area,
             r.pr_area, r.precision_at_half, r.recall_at_half,
             r.accuracy_at_half, r.accuracy_at_phi_c, r.epochs,
             r.seconds_per_epoch,
             (r.error or "").replace(",", ";")] for r in report.runs]
    _write_table(path, header, rows, comment)


def write_variant_table_csv(rows: list[dict], path, comment: str | None = None) -> None:
    """Model-comparison table: one row per evaluated variant."""
    header = ["variant", "max_accuracy", "max_f_measure",
              "f_measure_curve_area", "pr_curve_area", "seconds_per_epoch"]
    table = [[row["variant"], row["max_accuracy"], row["max_f_measure"],
              row["f_measure_curve_area"], row["pr_curve_area"],
              row.get("seconds_per_epoch", math.nan)] for row in rows]
    _write_table(path, header, table, comment)


def write_curve_csv(curve, path, comment: str | None = None) -> None:
    """Threshold-indexed curve points (PR or F, detected by type)."""
    if isinstance(curve, PRCurve):
        header = ["threshold", "precision", "recall"]
        rows = [[float(t), float(p), float(r)] for t, p, r in
                zip(curve.thresholds, curve.precisions, curve.recalls)]
    else:
        header = ["threshold", "f_measure"]
        rows = [[float(t), float(f)] for t, f in
                zip(curve.thresholds, curve.f_values)]
    _write_table(path, header, rows, comment)
