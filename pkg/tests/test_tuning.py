"""Loss metrics, CV plans, and model selection."""

import numpy as np
import pytest

from conftest import make_factor_panel
from postlaunch import (
    ModelSpec,
    bias,
    debiased_loss,
    default_candidates,
    make_cv_plan,
    relative_error,
    select_model,
)
from postlaunch.errors import (
    AllCandidatesFailed,
    ConfigInvalid,
    InsufficientColumns,
    ShapeMismatch,
    ZeroActualNorm,
)
from postlaunch.tuning import (
    ALPHA_SWEEP,
    DEFAULT_ALPHA,
    KNN_GRID,
    L1_LAMBDA_GRID,
    LAMBDA_GRID,
    CvFold,
    CvPlan,
    LossReport,
)

# ---------------------------------------------------------------------------
# Loss metrics


def test_relative_error_hand_values():
    pred = np.array([1.0, 2.0])
    actual = np.array([2.0, 4.0])
    assert relative_error(pred, actual, "l1") == pytest.approx(0.5)
    assert relative_error(pred, actual, "frobenius") == pytest.approx(np.sqrt(5) / np.sqrt(20))
    assert relative_error(actual, actual) == 0.0


def test_relative_error_errors():
    with pytest.raises(ShapeMismatch):
        relative_error(np.zeros(3), np.zeros(4))
    with pytest.raises(ConfigInvalid):
        relative_error(np.ones(2), np.ones(2), norm="l2")
    with pytest.raises(ZeroActualNorm):
        relative_error(np.ones(2), np.zeros(2))


def test_bias_sign_and_hand_values():
    assert bias(np.array([1.0, 3.0]), np.array([2.0, 2.0])) == 0.0
    assert bias(np.zeros(3), np.array([1.0, 2.0, 3.0])) == pytest.approx(2.0)
    # overprediction -> negative bias
    assert bias(np.array([5.0]), np.array([1.0])) == pytest.approx(-4.0)
    with pytest.raises(ShapeMismatch):
        bias(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ConfigInvalid):
        bias(np.zeros(0), np.zeros(0))


def test_debiased_loss_combination():
    pred = np.array([[0.0, 0.0]])
    actual = np.array([[1.0, 3.0]])
    rep = debiased_loss(pred, actual, alpha=10.0)
    assert rep.relative_error == pytest.approx(1.0)
    assert rep.bias == pytest.approx(2.0)
    assert rep.combined == pytest.approx(1.0 + 10.0 * 2.0)
    assert rep.alpha == 10.0 and rep.norm == "l1"
    assert debiased_loss(pred, actual, alpha=0.0).combined == pytest.approx(1.0)
    with pytest.raises(ConfigInvalid):
        debiased_loss(pred, actual, alpha=-1.0)


def test_loss_report_consistency_enforced():
    with pytest.raises(ConfigInvalid):
        LossReport(0.5, 0.1, 999.0, 20.0, "l1")
    with pytest.raises(ConfigInvalid):
        LossReport(-0.5, 0.1, -0.5 + 2.0, 20.0, "l1")


def test_alpha_sweep_contains_default():
    assert DEFAULT_ALPHA in ALPHA_SWEEP
    assert list(ALPHA_SWEEP) == sorted(ALPHA_SWEEP)


# ---------------------------------------------------------------------------
# CV plans


def test_holdout_tail_plan():
    plan = make_cv_plan(16, "holdout_tail", val_width=8)
    assert plan.scheme == "holdout_tail" and len(plan.folds) == 1
    np.testing.assert_array_equal(plan.folds[0].train_cols, np.arange(8))
    np.testing.assert_array_equal(plan.folds[0].val_cols, np.arange(8, 16))
    assert "train 1-8 / validate 9-16" in plan.describe()


def test_rolling_plan():
    plan = make_cv_plan(16, "rolling", folds=3, val_width=2)
    assert len(plan.folds) == 3
    starts = [f.val_cols[0] for f in plan.folds]
    assert starts == [10, 12, 14]
    for fold in plan.folds:
        np.testing.assert_array_equal(fold.train_cols, np.arange(fold.val_cols[0]))
        assert fold.val_cols.size == 2
    assert plan.describe().startswith("rolling: train 1-10 / validate 11-12")


def test_cv_plan_errors():
    with pytest.raises(InsufficientColumns):
        make_cv_plan(8, "holdout_tail", val_width=8)
    with pytest.raises(InsufficientColumns):
        make_cv_plan(6, "rolling", folds=3, val_width=2)
    with pytest.raises(ConfigInvalid):
        make_cv_plan(16, "random_kfold")
    with pytest.raises(ConfigInvalid):
        make_cv_plan(16, "rolling", folds=0)
    with pytest.raises(ConfigInvalid):
        make_cv_plan(16, "holdout_tail", val_width=0)


def test_cv_plan_validates_fold_geometry():
    with pytest.raises(ConfigInvalid):  # validation before training
        CvPlan((CvFold(np.arange(4, 8), np.arange(4)),), "holdout_tail", 16)
    with pytest.raises(ConfigInvalid):  # leaks into the post-period
        CvPlan((CvFold(np.arange(8), np.arange(8, 20)),), "holdout_tail", 16)
    with pytest.raises(ConfigInvalid):
        CvPlan((CvFold(np.arange(0), np.arange(8, 10)),), "holdout_tail", 16)


# ---------------------------------------------------------------------------
# Candidate grids


def test_default_candidates_composition():
    cands = default_candidates()
    labels = [c.label for c in cands]
    assert len(labels) == len(set(labels))
    by_method = {}
    for c in cands:
        by_method.setdefault(c.method, []).append(c)
    assert [c.hyper["k"] for c in by_method["knn"]] == list(KNN_GRID)
    assert by_method["pcr"] == [ModelSpec("pcr", {})]
    assert [c.hyper["lam"] for c in by_method["ridge"]] == list(LAMBDA_GRID)
    assert [c.hyper["lam"] for c in by_method["pcr_ridge"]] == list(LAMBDA_GRID)
    # coordinate-descent families use the floored grid
    assert [c.hyper["lam"] for c in by_method["lasso"]] == list(L1_LAMBDA_GRID)
    assert [c.hyper["lam"] for c in by_method["pcr_lasso"]] == list(L1_LAMBDA_GRID)
    assert min(L1_LAMBDA_GRID) == pytest.approx(0.1)
    assert min(LAMBDA_GRID) == pytest.approx(1e-4)


def test_default_candidates_filters_knn_by_donor_count():
    ks = [c.hyper["k"] for c in default_candidates(n_donors=3) if c.method == "knn"]
    assert ks == [1, 2]


# ---------------------------------------------------------------------------
# select_model


def test_select_model_ranks_by_combined_loss(factor_panel):
    cands = [
        ModelSpec("ridge", {"lam": 0.01}),
        ModelSpec("ridge", {"lam": 1e4}),
        ModelSpec("knn", {"k": 3}),
        ModelSpec("pcr", {}),
    ]
    res = select_model(factor_panel, factor_panel.donors, cands, alpha=0.0)
    combos = [rep.combined for _, rep in res.leaderboard]
    assert combos == sorted(combos)
    assert res.best == res.leaderboard[0][0]
    assert res.failures == {}
    assert set(res.fold_reports) == {c.label for c in cands}
    # a low-rank noisy panel is fit far better by shrunk regression than huge lam
    assert res.best != ModelSpec("ridge", {"lam": 1e4})


def test_select_model_aggregates_folds(factor_panel):
    plan = make_cv_plan(16, "rolling", folds=2, val_width=3)
    res = select_model(factor_panel, factor_panel.donors, [ModelSpec("ridge", {"lam": 1.0})], plan=plan)
    label = "ridge(lam=1)"
    per_fold = res.fold_reports[label]
    assert len(per_fold) == 2
    agg = res.leaderboard[0][1]
    assert agg.relative_error == pytest.approx(np.mean([r.relative_error for r in per_fold]))
    assert agg.bias == pytest.approx(np.mean([r.bias for r in per_fold]))
    assert agg.combined == pytest.approx(agg.relative_error + agg.alpha * abs(agg.bias))


def test_select_model_threads_do_not_change_result(factor_panel):
    cands = default_candidates(factor_panel.donors.size)
    a = select_model(factor_panel, factor_panel.donors, cands, threads=1)
    b = select_model(factor_panel, factor_panel.donors, cands, threads=4)
    assert a.best == b.best
    assert [(s.label, r.combined) for s, r in a.leaderboard] == [
        (s.label, r.combined) for s, r in b.leaderboard
    ]


def test_select_model_records_failures(factor_panel):
    cands = [ModelSpec("knn", {"k": 500}), ModelSpec("ridge", {"lam": 1.0})]
    res = select_model(factor_panel, factor_panel.donors, cands)
    assert res.best == ModelSpec("ridge", {"lam": 1.0})
    assert list(res.failures) == ["knn(k=500)"]
    assert "TooFewDonors" in res.failures["knn(k=500)"]


def test_select_model_all_failures_raises(factor_panel):
    with pytest.raises(AllCandidatesFailed, match="knn"):
        select_model(factor_panel, factor_panel.donors, [ModelSpec("knn", {"k": 500})])
    with pytest.raises(ConfigInvalid):
        select_model(factor_panel, factor_panel.donors, [])


def test_select_model_predict_fn_hook_and_tie_breaks(factor_panel):
    calls = []

    def constant_fn(panel, donors, spec, train_cols, pred_cols, center):
        calls.append((spec.label, tuple(train_cols), tuple(pred_cols), center))
        assert max(pred_cols) < panel.t0  # selection must stay inside the pre-period
        return panel.outcomes[np.ix_(panel.treated, pred_cols)] + 0.5

    cands = [
        ModelSpec("lasso", {"lam": 1.0}),
        ModelSpec("ridge", {"lam": 1.0}),
        ModelSpec("pcr", {}),
        ModelSpec("knn", {"k": 7}),
        ModelSpec("knn", {"k": 2}),
    ]
    res = select_model(factor_panel, factor_panel.donors, cands, predict_fn=constant_fn)
    # identical losses everywhere: simpler method wins, then smaller hyper
    assert res.best == ModelSpec("knn", {"k": 2})
    order = [s.label for s, _ in res.leaderboard]
    assert order == ["knn(k=2)", "knn(k=7)", "pcr", "ridge(lam=1)", "lasso(lam=1)"]
    assert len(calls) == len(cands)  # one holdout fold each
    rep = res.leaderboard[0][1]
    assert rep.bias == pytest.approx(-0.5)


def test_select_model_identical_duplicate_donors_tie():
    rng = np.random.default_rng(0)
    row = rng.normal(size=24)
    y = np.vstack([rng.normal(size=(2, 24)), np.tile(row, (8, 1))])
    panel_ids = tuple(f"u{i}" for i in range(10))
    from postlaunch import PanelMatrix

    panel = PanelMatrix(panel_ids, y, 16, np.array([0, 1]))
    cands = [ModelSpec("knn", {"k": 2}), ModelSpec("knn", {"k": 1})]
    res = select_model(panel, np.arange(2, 10), cands)
    assert res.best == ModelSpec("knn", {"k": 1})
    a, b = res.leaderboard[0][1], res.leaderboard[1][1]
    assert a.combined == b.combined
