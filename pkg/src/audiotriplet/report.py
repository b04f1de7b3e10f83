"""Cross-task analysis: how much of accuracy is explained by the model.

Fits ordinary least squares to accuracy ~ intercept + model + task with
dummy-coded factors. The reference levels (lexicographically first model and
task) are fixed at coefficient 0, so any two models' predicted accuracies on
a shared task differ by exactly their coefficient difference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import RankDeficiencyError, ValidationError


@dataclass(frozen=True)
class AccuracyRow:
    model: str
    task: str
    accuracy: float


@dataclass
class AccuracyTable:
    rows: list[AccuracyRow] = field(default_factory=list)

    def add(self, model: str, task: str, accuracy: float) -> None:
        self.rows.append(AccuracyRow(model=model, task=task, accuracy=float(accuracy)))

    def validate(self) -> None:
        seen = set()
        for row in self.rows:
            if not 0.0 <= row.accuracy <= 1.0:
                raise ValidationError(
                    f"accuracy {row.accuracy} for ({row.model}, {row.task}) "
                    f"outside [0, 1]")
            key = (row.model, row.task)
            if key in seen:
                raise ValidationError(f"duplicate (model, task) pair {key}")
            seen.add(key)

    def models(self) -> list[str]:
        return sorted({row.model for row in self.rows})

    def tasks(self) -> list[str]:
        return sorted({row.task for row in self.rows})


@dataclass
class EffectReport:
    intercept: float
    model_effects: dict[str, float]  # reference model fixed at 0.0
    task_effects: dict[str, float]  # reference task fixed at 0.0
    r_squared: float
    reference_model: str
    reference_task: str

    def predict(self, model: str, task: str) -> float:
        if model not in self.model_effects:
            raise ValidationError(f"unknown model {model!r}")
        if task not in self.task_effects:
            raise ValidationError(f"unknown task {task!r}")
        return self.intercept + self.model_effects[model] + self.task_effects[task]


def design_matrix(table: AccuracyTable) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Dummy-coded design: intercept, then non-reference models and tasks."""
    models = table.models()
    tasks = table.tasks()
    columns = (["intercept"]
               + [f"model:{m}" for m in models[1:]]
               + [f"task:{t}" for t in tasks[1:]])
    X = np.zeros((len(table.rows), len(columns)))
    y = np.zeros(len(table.rows))
    col_index = {name: j for j, name in enumerate(columns)}
    for i, row in enumerate(table.rows):
        X[i, 0] = 1.0
        if row.model != models[0]:
            X[i, col_index[f"model:{row.model}"]] = 1.0
        if row.task != tasks[0]:
            X[i, col_index[f"task:{row.task}"]] = 1.0
        y[i] = row.accuracy
    return X, y, columns


def model_effect_regression(table: AccuracyTable) -> EffectReport:
    """OLS of accuracy on model and task factors; R² = 1 − SS_res/SS_tot."""
    table.validate()
    models = table.models()
    tasks = table.tasks()
    if len(models) < 2 or len(tasks) < 2:
        raise ValidationError(
            f"need >= 2 models and >= 2 tasks, got {len(models)} model(s) "
            f"and {len(tasks)} task(s)")
    X, y, columns = design_matrix(table)

    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        # Name the offending columns: those whose removal restores full rank
        # relative to the preceding independent set (greedy scan).
        independent: list[int] = []
        collinear: list[str] = []
        for j in range(X.shape[1]):
            trial = X[:, independent + [j]]
            if np.linalg.matrix_rank(trial) > len(independent):
                independent.append(j)
            else:
                collinear.append(columns[j])
        raise RankDeficiencyError(
            f"design matrix is rank deficient; collinear columns: "
            f"{', '.join(collinear)}")

    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    residuals = y - X @ coef
    ss_res = float(residuals @ residuals)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    # Guard against floating-point overshoot on exact fits.
    r_squared = min(1.0, max(0.0, r_squared)) if ss_tot > 0 else r_squared

    model_effects = {models[0]: 0.0}
    task_effects = {tasks[0]: 0.0}
    for name, value in zip(columns[1:], coef[1:]):
        kind, level = name.split(":", 1)
        if kind == "model":
            model_effects[level] = float(value)
        else:
            task_effects[level] = float(value)
    return EffectReport(intercept=float(coef[0]), model_effects=model_effects,
                        task_effects=task_effects, r_squared=float(r_squared),
                        reference_model=models[0], reference_task=tasks[0])


def write_effect_csv(report: EffectReport, path) -> None:
    """Regression table as CSV rows: term,level,value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["term", "level", "value"])
        writer.writerow(["intercept", "", f"{report.intercept:.6f}"])
        for model in sorted(report.model_effects):
            writer.writerow(["model", model, f"{report.model_effects[model]:.6f}"])
        for task in sorted(report.task_effects):
            writer.writerow(["task", task, f"{report.task_effects[task]:.6f}"])
        writer.writerow(["r_squared", "", f"{report.r_squared:.6f}"])


def format_effect_table(report: EffectReport) -> str:
    lines = [f"{'term':<12} {'level':<24} {'value':>10}",
             f"{'intercept':<12} {'':<24} {report.intercept:>10.4f}"]
    for model in sorted(report.model_effects):
        marker = " (ref)" if model == report.reference_model else ""
        lines.append(f"{'model':<12} {model + marker:<24} "
                     f"{report.model_effects[model]:>10.4f}")
    for task in sorted(report.task_effects):
        marker = " (ref)" if task == report.reference_task else ""
        lines.append(f"{'task':<12} {task + marker:<24} "
                     f"{report.task_effects[task]:>10.4f}")
    lines.append(f"{'r_squared':<12} {'':<24} {report.r_squared:>10.4f}")
    return "\n".join(lines)
