"""Accuracy aggregation and additive model/task effect regression.

The least-squares fit is checked against a normal-equations oracle solved
with an explicit matrix inverse, and against hand-built additive fixtures
whose exact effects are known.
"""

import numpy as np
import pytest

from audiotriplet.errors import RankDeficiencyError, ValidationError
from audiotriplet.report import (
    AccuracyTable,
    design_matrix,
    format_effect_table,
    model_effect_regression,
    write_effect_csv,
)


def _additive_table():
    """accuracy = base + model effect + task effect, exactly additive."""
    base = 0.5
    model_fx = {"m-base": 0.0, "m-plus": 0.1, "m-minus": -0.2}
    task_fx = {"t0": 0.0, "t1": 0.05, "t2": 0.25}
    table = AccuracyTable()
    for model, dm in model_fx.items():
        for task, dt in task_fx.items():
            table.add(model, task, base + dm + dt)
    return table, base, model_fx, task_fx


def test_additive_fixture_recovered_exactly():
    table, base, model_fx, task_fx = _additive_table()
    report = model_effect_regression(table)
    assert report.r_squared == pytest.approx(1.0, abs=1e-12)
    # References are the lexicographically first levels.
    assert report.reference_model == "m-base"
    assert report.reference_task == "t0"
    assert report.model_effects["m-base"] == 0.0
    assert report.task_effects["t0"] == 0.0
    # Effect differences equal the construction differences.
    for m, dm in model_fx.items():
        assert report.model_effects[m] == pytest.approx(dm, abs=1e-10)
    for t, dt in task_fx.items():
        assert report.task_effects[t] == pytest.approx(dt, abs=1e-10)
    assert report.intercept == pytest.approx(base, abs=1e-10)


def test_predict_reproduces_additive_cells():
    table, *_ = _additive_table()
    report = model_effect_regression(table)
    for row in table.rows:
        assert report.predict(row.model, row.task) == pytest.approx(
            row.accuracy, abs=1e-10)


def test_effects_match_normal_equations_oracle():
    rng = np.random.default_rng(42)
    table = AccuracyTable()
    for model in ("alpha", "beta", "gamma", "delta"):
        for task in ("t0", "t1", "t2", "t3", "t4"):
            table.add(model, task, float(rng.uniform(0.1, 0.9)))
    X, y, columns = design_matrix(table)
    beta = np.linalg.inv(X.T @ X) @ X.T @ y
    fitted = dict(zip(columns, beta))

    report = model_effect_regression(table)
    assert report.intercept == pytest.approx(fitted["intercept"], abs=1e-10)
    for m in ("beta", "delta", "gamma"):
        assert report.model_effects[m] == pytest.approx(
            fitted[f"model:{m}"], abs=1e-10)
    for t in ("t1", "t2", "t3", "t4"):
        assert report.task_effects[t] == pytest.approx(
            fitted[f"task:{t}"], abs=1e-10)
    resid = y - X @ beta
    expected_r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    assert report.r_squared == pytest.approx(expected_r2, abs=1e-10)


def test_effect_differences_invariant_to_reference_relabeling():
    # Renaming levels changes which one is the reference; pairwise effect
    # differences (the meaningful quantities) must not move.
    rng = np.random.default_rng(7)
    accs = {(m, t): float(rng.uniform(0.2, 0.8))
            for m in ("m1", "m2", "m3") for t in ("ta", "tb")}
    table = AccuracyTable()
    for (m, t), acc in accs.items():
        table.add(m, t, acc)
    renamed = AccuracyTable()
    alias = {"m1": "z-last", "m2": "a-first", "m3": "mid"}
    for (m, t), acc in accs.items():
        renamed.add(alias[m], t, acc)

    rep1 = model_effect_regression(table)
    rep2 = model_effect_regression(renamed)
    assert rep1.reference_model == "m1" and rep2.reference_model == "a-first"
    diff1 = rep1.model_effects["m2"] - rep1.model_effects["m3"]
    diff2 = rep2.model_effects["a-first"] - rep2.model_effects["mid"]
    assert diff1 == pytest.approx(diff2, abs=1e-10)
    # Cell predictions are reference-independent too.
    for (m, t), _ in accs.items():
        assert rep1.predict(m, t) == pytest.approx(
            rep2.predict(alias[m], t), abs=1e-10)


def test_duplicate_pair_rejected():
    table = AccuracyTable()
    table.add("m", "t", 0.5)
    table.add("m", "t", 0.6)
    with pytest.raises(ValidationError):
        table.validate()


def test_out_of_range_accuracy_rejected():
    table = AccuracyTable()
    table.add("m", "t", 1.2)
    with pytest.raises(ValidationError):
        table.validate()


def test_single_model_or_task_rejected():
    table = AccuracyTable()
    table.add("only", "t0", 0.5)
    table.add("only", "t1", 0.6)
    with pytest.raises(ValidationError):
        model_effect_regression(table)
    table2 = AccuracyTable()
    table2.add("m0", "only", 0.5)
    table2.add("m1", "only", 0.6)
    with pytest.raises(ValidationError):
        model_effect_regression(table2)


def test_rank_deficiency_names_collinear_column():
    # Two cells, (A, t1) and (B, t2): the model and task indicators are
    # perfectly confounded, so the task column must be reported.
    table = AccuracyTable()
    table.add("A", "t1", 0.4)
    table.add("B", "t2", 0.7)
    with pytest.raises(RankDeficiencyError) as exc_info:
        model_effect_regression(table)
    assert "task:t2" in str(exc_info.value) or "model:B" in str(exc_info.value)


def test_design_matrix_layout():
    table, *_ = _additive_table()
    X, y, columns = design_matrix(table)
    assert columns[0] == "intercept"
    assert X.shape == (9, 1 + 2 + 2)
    np.testing.assert_array_equal(X[:, 0], 1.0)
    assert len(y) == 9
    # one-hot structure: each row has exactly one model dummy at most
    assert set(np.unique(X)) <= {0.0, 1.0}
    for name, row in zip(columns[1:], X.T[1:]):
        assert name.startswith(("model:", "task:"))
        assert 0 < row.sum() < len(table.rows)


def test_csv_and_table_output(tmp_path):
    table, *_ = _additive_table()
    report = model_effect_regression(table)
    out = tmp_path / "effects.csv"
    write_effect_csv(report, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "term,level,value"
    assert lines[1].startswith("intercept,,")
    assert any(line.startswith("model,m-plus,") for line in lines)
    assert lines[-1].startswith("r_squared,,")
    text = format_effect_table(report)
    assert "(ref)" in text
    assert "m-base" in text and "t0" in text


def test_incomplete_grid_still_fits():
    # Missing cells are fine as long as the design stays full rank.
    table = AccuracyTable()
    cells = [("m0", "t0", 0.5), ("m0", "t1", 0.6), ("m1", "t0", 0.7),
             ("m1", "t1", 0.8), ("m2", "t0", 0.4)]
    for m, t, a in cells:
        table.add(m, t, a)
    report = model_effect_regression(table)
    assert 0.0 <= report.r_squared <= 1.0
    assert set(report.model_effects) == {"m0", "m1", "m2"}
