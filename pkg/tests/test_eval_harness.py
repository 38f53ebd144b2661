import csv

import numpy as np
import pytest

from sepme.erasure_trainers import EraseHyper, train_sepme
from sepme.eval_harness import (
    ablate_tau,
    edited_delta_norm,
    evaluate,
    separability_suite,
    train_classifier,
    write_ablation_csv,
    write_eval_csv,
    write_subsets_csv,
)
from sepme.toy_diffusion import (
    ModelDims,
    build_concepts,
    init_denoiser,
    make_default_dataset,
    make_schedule,
)
from sepme.weight_decoupling import delta_norm

FORGOTTEN = ["A", "B", "C"]
HELD_OUT = ["D", "E"]


@pytest.fixture(scope="module")
def classifier(trained_model):
    _, concepts, schedule, theta, _ = trained_model
    return train_classifier(theta, concepts, schedule, n_per_concept=200, seed=11)


@pytest.fixture(scope="module")
def erased(trained_model):
    data, concepts, schedule, theta, _ = trained_model
    hyper = EraseHyper(lr=1.0, max_iters=600, seed=0)
    eraser, reports = train_sepme(theta, FORGOTTEN, data, concepts, schedule,
                                  hyper, mode="separate")
    return eraser, reports


# ---------------------------------------------------------------------------
# classifier


def test_classifier_meets_holdout_floor(classifier):
    assert classifier.holdout_accuracy >= 0.95
    assert set(classifier.classes) == {"A", "B", "C", "D", "E", "blank"}


def test_classifier_is_deterministic(trained_model):
    _, concepts, schedule, theta, _ = trained_model
    a = train_classifier(theta, concepts, schedule, n_per_concept=50, seed=3)
    b = train_classifier(theta, concepts, schedule, n_per_concept=50, seed=3)
    assert np.array_equal(a.centroids, b.centroids)
    assert a.holdout_accuracy == b.holdout_accuracy


def test_classifier_rejects_unseparated_model():
    names = ["A", "B", "C"]
    dims = ModelDims(data_dim=2, hidden_dim=8, token_dim=16, token_count=2,
                     attn_dim=8, ffn_dim=8, blocks=1)
    concepts = build_concepts(names, dims.token_count, dims.token_dim, seed=0)
    schedule = make_schedule(40)
    theta = init_denoiser(dims, schedule.timesteps, seed=0)
    with pytest.raises(ValueError, match="holdout"):
        train_classifier(theta, concepts, schedule, n_per_concept=40, seed=0)


def test_classifier_input_validation(trained_model):
    _, concepts, schedule, theta, _ = trained_model
    with pytest.raises(ValueError):
        train_classifier(theta, concepts, schedule, n_per_concept=0)


# ---------------------------------------------------------------------------
# evaluate


def test_identity_edit_reports_zero_deltas(trained_model, classifier):
    _, concepts, schedule, theta, _ = trained_model
    report = evaluate(theta, theta, concepts, schedule, classifier,
                      n_per_concept=60, seed=5)
    assert report.delta_norm == 0.0
    for row in report.rows:
        assert row.acc_after == row.acc_before
        assert row.distance == 0.0
        assert row.corr > 0.0


def test_evaluate_validates_inputs(trained_model, classifier):
    _, concepts, schedule, theta, _ = trained_model
    with pytest.raises(ValueError):
        evaluate(theta, theta, concepts, schedule, classifier, n_per_concept=0)
    with pytest.raises(ValueError):
        evaluate(theta, theta, concepts, schedule, None, n_per_concept=10)


def test_erased_concepts_drop_while_held_out_hold(trained_model, classifier, erased):
    _, concepts, schedule, theta, _ = trained_model
    eraser, _ = erased
    edited = eraser.apply(FORGOTTEN)
    report = evaluate(edited, theta, concepts, schedule, classifier,
                      n_per_concept=200, seed=5)
    for name in FORGOTTEN:
        row = report.row(name)
        assert row.acc_before - row.acc_after >= 0.50
        assert row.distance > 0.1
    for name in HELD_OUT:
        row = report.row(name)
        assert abs(row.acc_after - row.acc_before) <= 0.05
    assert report.delta_norm > 0.0
    with pytest.raises(KeyError):
        report.row("nope")


def test_eval_csv_roundtrip(trained_model, classifier, tmp_path):
    _, concepts, schedule, theta, _ = trained_model
    report = evaluate(theta, theta, concepts, schedule, classifier,
                      n_per_concept=20, seed=1)
    path = tmp_path / "eval.csv"
    write_eval_csv(path, report)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["concept", "acc_before", "acc_after", "distance",
                       "corr", "delta_norm"]
    assert len(rows) == 1 + len(report.rows)
    for rec, row in zip(rows[1:], report.rows):
        assert rec[0] == row.name
        assert float(rec[1]) == row.acc_before
        assert float(rec[4]) == row.corr


def test_edited_delta_norm_matches_direct_metric(trained_model):
    _, _, _, theta, _ = trained_model
    assert edited_delta_norm(theta, theta) == 0.0
    values = theta.copy_values()
    bump = np.zeros_like(values["block0.to_k"])
    bump[0, 0] = 0.5
    values["block0.to_k"] = values["block0.to_k"] + bump
    edited = theta.with_values(values)
    assert edited_delta_norm(edited, theta) == delta_norm({"block0.to_k": bump})


# ---------------------------------------------------------------------------
# tau ablation


def test_tau_sweep_monotone_in_tau(trained_model, classifier):
    data, concepts, schedule, theta, _ = trained_model
    hyper = EraseHyper(lr=1.0, max_iters=300, seed=0)
    rows = ablate_tau([1e9, 0.3, -1e9], theta, FORGOTTEN, data, concepts,
                      schedule, hyper, classifier, n_per_concept=100, eval_seed=2)
    assert [r.tau for r in rows] == [1e9, 0.3, -1e9]
    # immediate stop at a huge threshold: nothing trained, nothing changed
    assert rows[0].iters_run == len(FORGOTTEN)
    assert rows[0].delta_norm == 0.0
    # iters_run non-increasing and increment size non-decreasing in tau
    assert rows[0].iters_run <= rows[1].iters_run <= rows[2].iters_run
    assert rows[0].delta_norm <= rows[1].delta_norm <= rows[2].delta_norm
    assert rows[2].erased_acc < rows[0].erased_acc


def test_ablation_csv_schema(trained_model, classifier, tmp_path):
    data, concepts, schedule, theta, _ = trained_model
    hyper = EraseHyper(lr=1.0, max_iters=5, seed=0)
    rows = ablate_tau([1e9], theta, ["A"], data, concepts, schedule, hyper,
                      classifier, n_per_concept=20, eval_seed=0)
    path = tmp_path / "ablation.csv"
    write_ablation_csv(path, rows)
    with open(path) as fh:
        recs = list(csv.reader(fh))
    assert recs[0] == ["tau", "iters_run", "delta_norm", "erased_acc",
                       "preserved_acc"]
    assert float(recs[1][0]) == 1e9
    assert int(recs[1][1]) == 1


# ---------------------------------------------------------------------------
# separability suite


def test_suite_reports_exact_preservation(trained_model, erased):
    _, concepts, schedule, _, _ = trained_model
    eraser, _ = erased
    result = separability_suite(eraser, concepts, schedule, probes=50, seed=0)
    # 8 subsets x (3 concepts + blank)
    assert len(result.cells) == 32
    for cell in result.cells:
        if cell.check in ("preserved_dev", "blank_dev"):
            assert cell.ok, (cell.subset, cell.concept, cell.value)
            if not cell.subset:
                assert cell.value == 0.0


def test_suite_erased_cells_use_thresholds(trained_model, erased):
    _, concepts, schedule, _, _ = trained_model
    eraser, _ = erased
    loose = separability_suite(eraser, concepts, schedule, probes=30,
                               taus={n: 1e9 for n in FORGOTTEN}, seed=0)
    for cell in loose.cells:
        if cell.check == "erased_corr":
            assert cell.bound == 1e9 and cell.ok


def test_suite_records_dense_increments_as_uncovered(trained_model):
    data, concepts, schedule, theta, _ = trained_model
    hyper = EraseHyper(lr=1.0, dense_lr=3e-3, max_iters=60, seed=0)
    eraser, _ = train_sepme(theta, FORGOTTEN, data, concepts, schedule, hyper,
                            mode="iterative")
    result = separability_suite(eraser, concepts, schedule, probes=20, seed=0)
    flagged = {(c.subset, c.concept): c for c in result.cells if c.note}
    assert flagged and not result.ok
    # the dense step-1 increment protects nothing, not even blank
    assert (("A",), "blank") in flagged
    assert (("A",), "B") in flagged
    # constraints are built from past concepts only: B's increment covers A
    # but knows nothing about C
    assert (("B",), "C") in flagged
    ok_cells = {(c.subset, c.concept): c.ok for c in result.cells}
    assert ok_cells[(("B",), "A")]
    assert ok_cells[(("C",), "A")]
    assert ok_cells[(("B", "C"), "A")]
    assert ok_cells[(("C",), "blank")]


def test_suite_validation_and_csv(trained_model, erased, tmp_path):
    _, concepts, schedule, _, _ = trained_model
    eraser, _ = erased
    with pytest.raises(ValueError):
        separability_suite(eraser, concepts, schedule, probes=0)
    result = separability_suite(eraser, concepts, schedule, probes=10, seed=1)
    path = tmp_path / "subsets.csv"
    write_subsets_csv(path, result)
    with open(path) as fh:
        recs = list(csv.reader(fh))
    assert recs[0] == ["subset", "concept", "check", "value", "bound", "ok", "note"]
    assert len(recs) == 1 + len(result.cells)
