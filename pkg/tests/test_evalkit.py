import json
import random
from fractions import Fraction

import pytest

from oracles import metrics_by_definition
from sitewarden import fixtures
from sitewarden.errors import EmptyMatrix, KeyMismatch
from sitewarden.evalkit import (
    ConfusionMatrix,
    RunResult,
    aggregate,
    compute_metrics,
    evaluate,
    format_table,
    load_predictions,
    load_truth,
    table_json,
    tally,
)

U, S = "Unsafe", "Safe"


def keyed(labels):
    return {("A", "1", i): l for i, l in enumerate(labels)}


def test_tally_examples():
    assert tally(keyed([U] * 3), keyed([U] * 3)) == ConfusionMatrix(3, 0, 0, 0)
    assert tally(keyed([U, S, U, S]), keyed([U, U, S, S])) == ConfusionMatrix(1, 1, 1, 1)


def test_tally_key_mismatch():
    with pytest.raises(KeyMismatch) as err:
        tally(keyed([U, U]), keyed([U, U, S]))
    assert err.value.missing_in_predictions == [("A", "1", 2)]


def test_tally_symmetry():
    rng = random.Random(1)
    flip = {U: S, S: U}
    for _ in range(200):
        p = keyed([rng.choice([U, S]) for _ in range(20)])
        t = keyed([rng.choice([U, S]) for _ in range(20)])
        cm = tally(p, t)
        swapped = tally({k: flip[v] for k, v in p.items()}, {k: flip[v] for k, v in t.items()})
        assert swapped == ConfusionMatrix(cm.tn, cm.tp, cm.fn, cm.fp)


def test_metrics_examples():
    m = compute_metrics(ConfusionMatrix(71, 54, 16, 6))
    assert m.recall == Fraction(71, 77)
    assert m.percent() == {"accuracy": 85.0, "precision": 81.6, "recall": 92.2, "f1": 86.6}
    assert compute_metrics(ConfusionMatrix(1, 1, 0, 0)).as_dict() == {k: 1 for k in ("accuracy", "precision", "recall", "f1")}
    degenerate = compute_metrics(ConfusionMatrix(0, 5, 0, 0))
    assert degenerate.accuracy == 1 and degenerate.precision is None and degenerate.recall is None and degenerate.f1 is None
    assert compute_metrics(ConfusionMatrix(0, 1, 1, 1)).f1 is None
    with pytest.raises(EmptyMatrix):
        compute_metrics(ConfusionMatrix())


def test_brute_force_equivalence():
    rng = random.Random(8)
    for _ in range(1000):
        n = rng.randint(1, 50)
        pred = [rng.choice([U, S]) for _ in range(n)]
        truth = [rng.choice([U, S]) for _ in range(n)]
        m = compute_metrics(tally(keyed(pred), keyed(truth)))
        assert (m.accuracy, m.precision, m.recall, m.f1) == metrics_by_definition(pred, truth)


def test_aggregate_micro_and_macro():
    cm = ConfusionMatrix(5, 3, 1, 2)
    rows = aggregate([RunResult("A", "1", "fw", cm)])
    assert [r.run for r in rows] == ["all", "1"]
    assert rows[0].metrics == rows[1].metrics
    many = aggregate([RunResult("A", str(i), "fw", cm) for i in range(4)])
    assert many[0].metrics == compute_metrics(cm)
    assert many[0].matrix == ConfusionMatrix(20, 12, 4, 8)
    mixed = [RunResult("A", "1", "fw", ConfusionMatrix(1, 0, 0, 0)), RunResult("A", "2", "fw", ConfusionMatrix(1, 0, 1, 1))]
    micro = aggregate(mixed)[0].metrics
    macro = aggregate(mixed, macro=True)[0].metrics
    assert micro.recall == Fraction(2, 3)
    assert macro.recall == Fraction(3, 4)


def test_fixture_tables():
    for system, name in (("framework", "framework"), ("baseline", "gpt-4o")):
        truth = load_truth(fixtures.truth_path(system))
        preds = load_predictions(fixtures.predictions_path(system))
        assert list(preds) == [name]
        rows = {r.scenario: r for r in aggregate(evaluate(truth, preds)) if r.run == "all"}
        for scenario, matrix in fixtures.MATRICES[system].items():
            assert rows[scenario].matrix.as_tuple() == matrix
            assert rows[scenario].metrics.percent()["recall"] == fixtures.TARGET_RECALL[system][scenario]


def test_predictions_from_assessments_file(tmp_path):
    path = tmp_path / "assessments.jsonl"
    path.write_text("".join(json.dumps({"frame_index": i, "label": l}) + "\n" for i, l in enumerate([U, S])))
    preds = load_predictions(path, default_scenario="A", default_run="1", default_system="fw")
    assert preds == {"fw": {("A", "1", 0): U, ("A", "1", 1): S}}
    with pytest.raises(ValueError):
        load_predictions(path)


def test_evaluate_strict_coverage():
    truth = keyed([U, S])
    with pytest.raises(KeyMismatch):
        evaluate(truth, {"fw": {("A", "1", 0): U}})
    with pytest.raises(KeyMismatch):
        evaluate(truth, {"fw": {**truth, ("A", "1", 9): U}})


def test_table_output():
    rows = aggregate([RunResult("A", "1", "fw", ConfusionMatrix(0, 5, 0, 0))])
    text = format_table(rows)
    assert "undef" in text and text.splitlines()[0].startswith("scenario")
    data = table_json(rows)
    assert data["averaging"] == "micro" and data["rows"][0]["precision"] is None
