"""Phase-2 solver tests. Oracles are defined first and kept dumb on
purpose: scipy descent for ridge, KKT conditions for lasso, the
pseudo-inverse for full-rank PCR, an exhaustive sort for kNN."""

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_factor_panel
from postlaunch import (
    ModelSpec,
    fit_predict,
    hard_threshold_rank,
    knn_predict,
    lasso_fit,
    latent_donors,
    pcr_predict,
    ridge_fit,
)
from postlaunch.errors import ConfigInvalid, SingularSystem, TooFewDonors
from postlaunch.regress import (
    _center,
    knn_fit,
    lasso_lambda_max,
    linear_predict,
    nearest_donor_rows,
)

# ---------------------------------------------------------------------------
# Oracles


def ridge_objective(Xc, Yc, W, lam):
    resid = Yc - Xc @ W
    return float((resid**2).sum() + lam * (W**2).sum())


def ridge_descent_oracle(Xc, Yc, lam):
    """L-BFGS on the ridge objective, started from zero."""
    shape = (Xc.shape[1], Yc.shape[1])

    def f(w_flat):
        W = w_flat.reshape(shape)
        resid = Yc - Xc @ W
        grad = 2.0 * (Xc.T @ (Xc @ W - Yc) + lam * W)
        return float((resid**2).sum() + lam * (W**2).sum()), grad.ravel()

    res = scipy.optimize.minimize(
        f,
        np.zeros(shape).ravel(),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 20_000, "ftol": 1e-18, "gtol": 1e-14},
    )
    return res.x.reshape(shape)


def lasso_kkt_gap(Xc, Yc, W, lam):
    """Largest violation of the lasso stationarity conditions.

    Objective (1/(2 T0))‖y − Xw‖² + λ‖w‖₁ per column: active weights
    need the correlation pinned at λ·sign(w), inactive ones below λ.
    """
    corr = Xc.T @ (Yc - Xc @ W) / Xc.shape[0]
    active = W != 0
    gap_active = np.abs(corr - lam * np.sign(W))[active]
    gap_inactive = np.clip(np.abs(corr) - lam, 0.0, None)[~active]
    parts = [g.max() for g in (gap_active, gap_inactive) if g.size]
    return max(parts) if parts else 0.0


def exhaustive_knn_rows(donor_train, target, k):
    dists = np.linalg.norm(donor_train - target, axis=1)
    return sorted(range(dists.size), key=lambda j: (dists[j], j))[:k]


def random_problem(T0, d, n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(T0, d))
    Y = rng.normal(size=(T0, n))
    return X, Y


# ---------------------------------------------------------------------------
# Ridge


@pytest.mark.parametrize("T0,d,lam", [(12, 6, 1.0), (12, 6, 100.0), (8, 20, 10.0), (8, 20, 0.1)])
def test_ridge_matches_descent_oracle(T0, d, lam):
    X, Y = random_problem(T0, d, 3, seed=d + T0)
    model = ridge_fit(X.T, Y.T, lam, intercept=False)
    W_oracle = ridge_descent_oracle(X, Y, lam)
    j_closed = ridge_objective(X, Y, model.coefficients, lam)
    j_oracle = ridge_objective(X, Y, W_oracle, lam)
    assert j_closed <= j_oracle + 1e-9
    assert abs(j_closed - j_oracle) < 1e-6
    grad = 2.0 * (X.T @ (X @ model.coefficients - Y) + lam * model.coefficients)
    assert np.abs(grad).max() < 1e-8


def test_ridge_intercept_equals_centered_fit():
    X, Y = random_problem(15, 5, 2, seed=0)
    X = X + 3.0  # force a nonzero mean so the intercept matters
    model = ridge_fit(X.T, Y.T, 2.0, intercept=True)
    Xc, Yc, xm, ym = _center(X, Y, True)
    grad = 2.0 * (Xc.T @ (Xc @ model.coefficients - Yc) + 2.0 * model.coefficients)
    assert np.abs(grad).max() < 1e-8
    np.testing.assert_allclose(model.intercepts, ym - xm @ model.coefficients)


def test_ridge_zero_lambda_equals_lstsq():
    X, Y = random_problem(20, 6, 2, seed=3)
    model = ridge_fit(X.T, Y.T, 0.0, intercept=False)
    W_ls, *_ = np.linalg.lstsq(X, Y, rcond=None)
    np.testing.assert_allclose(model.coefficients, W_ls, atol=1e-8)


def test_ridge_zero_lambda_singular_raises():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(2, 8))
    donor_pre = np.vstack([base[0], base[0], base[1]])  # duplicated donor
    with pytest.raises(SingularSystem):
        ridge_fit(donor_pre, rng.normal(size=(1, 8)), 0.0, intercept=False)


def test_ridge_negative_lambda_rejected():
    X, Y = random_problem(8, 3, 1, seed=5)
    with pytest.raises(ConfigInvalid):
        ridge_fit(X.T, Y.T, -1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ridge_norm_shrinks_with_lambda(seed):
    X, Y = random_problem(10, 7, 2, seed=seed)
    norms = [
        float(np.linalg.norm(ridge_fit(X.T, Y.T, lam, intercept=False).coefficients))
        for lam in (0.01, 1.0, 100.0)
    ]
    assert norms[0] >= norms[1] - 1e-9 and norms[1] >= norms[2] - 1e-9


# ---------------------------------------------------------------------------
# Lasso


@pytest.mark.parametrize("T0,d,lam_frac", [(20, 8, 0.1), (20, 8, 0.5), (10, 25, 0.3)])
def test_lasso_satisfies_kkt(T0, d, lam_frac):
    X, Y = random_problem(T0, d, 3, seed=T0 + d)
    lam = lam_frac * lasso_lambda_max(X.T, Y.T, intercept=False)
    model = lasso_fit(X.T, Y.T, lam, intercept=False)
    assert model.converged
    assert lasso_kkt_gap(X, Y, model.coefficients, lam) < 1e-5


def test_lasso_kkt_with_intercept():
    X, Y = random_problem(18, 6, 2, seed=9)
    X = X + 1.5
    lam = 0.2 * lasso_lambda_max(X.T, Y.T, intercept=True)
    model = lasso_fit(X.T, Y.T, lam, intercept=True)
    Xc, Yc, xm, ym = _center(X, Y, True)
    assert lasso_kkt_gap(Xc, Yc, model.coefficients, lam) < 1e-5
    np.testing.assert_allclose(model.intercepts, ym - xm @ model.coefficients)


def test_lasso_all_zero_at_lambda_max():
    X, Y = random_problem(15, 10, 2, seed=11)
    lam_max = lasso_lambda_max(X.T, Y.T, intercept=False)
    for lam in (lam_max, 1.3 * lam_max, 10 * lam_max):
        model = lasso_fit(X.T, Y.T, lam, intercept=False)
        assert not model.coefficients.any()


def test_lasso_sparsity_increases_with_lambda():
    X, Y = random_problem(30, 12, 1, seed=13)
    lam_max = lasso_lambda_max(X.T, Y.T, intercept=False)
    counts = [
        int((lasso_fit(X.T, Y.T, f * lam_max, intercept=False).coefficients != 0).sum())
        for f in (0.01, 0.3, 0.9)
    ]
    assert counts[0] >= counts[1] >= counts[2]


# ---------------------------------------------------------------------------
# kNN


def test_knn_equals_exhaustive_oracle():
    rng = np.random.default_rng(17)
    donor_train = rng.normal(size=(30, 12))
    treated_train = rng.normal(size=(4, 12))
    for k in (1, 3, 7):
        model = knn_fit(donor_train, treated_train, k)
        for i in range(4):
            got = np.flatnonzero(model.coefficients[:, i])
            want = exhaustive_knn_rows(donor_train, treated_train[i], k)
            assert sorted(got) == sorted(want)


def test_knn_prediction_is_neighbor_mean():
    rng = np.random.default_rng(19)
    donor_train = rng.normal(size=(20, 10))
    donor_post = rng.normal(size=(20, 4))
    treated_train = rng.normal(size=(2, 10))
    model = knn_fit(donor_train, treated_train, 5)
    from postlaunch.regress import knn_predict_matrix

    yhat = knn_predict_matrix(model, donor_post)
    for i in range(2):
        sel = sorted(exhaustive_knn_rows(donor_train, treated_train[i], 5))
        np.testing.assert_array_equal(yhat[i], donor_post[sel].mean(axis=0))


def test_knn_k1_is_bit_exact_copy():
    rng = np.random.default_rng(23)
    donor_train = rng.normal(size=(10, 6))
    donor_post = rng.normal(size=(10, 3))
    treated_train = donor_train[4:5] + 1e-9
    model = knn_fit(donor_train, treated_train, 1)
    from postlaunch.regress import knn_predict_matrix

    assert np.array_equal(knn_predict_matrix(model, donor_post)[0], donor_post[4])


def test_knn_ties_break_by_row_index():
    donor_train = np.zeros((5, 4))
    target = np.zeros(4)
    assert list(nearest_donor_rows(donor_train, target, 3)) == [0, 1, 2]


def test_knn_too_few_donors():
    with pytest.raises(TooFewDonors):
        knn_fit(np.zeros((3, 4)), np.zeros((1, 4)), 5)


# ---------------------------------------------------------------------------
# PCR family


def test_pcr_full_rank_equals_pinv_lstsq():
    X, Y = random_problem(16, 6, 3, seed=29)  # donors x T0 = 6 x 16, full rank 6
    rng = np.random.default_rng(30)
    donor_pred = rng.normal(size=(6, 5))
    from postlaunch.regress import pcr_fit_predict

    model, yhat_train, yhat_pred = pcr_fit_predict(
        X.T, donor_pred, Y.T, rank_override=6, intercept=False
    )
    W_pinv = np.linalg.pinv(X) @ Y
    np.testing.assert_allclose(yhat_train, (W_pinv.T @ X.T), atol=1e-6)
    np.testing.assert_allclose(yhat_pred, (W_pinv.T @ donor_pred), atol=1e-6)


def test_pcr_full_rank_equals_pinv_with_intercept():
    X, Y = random_problem(14, 5, 2, seed=31)
    X = X + 2.0
    rng = np.random.default_rng(32)
    donor_pred = rng.normal(size=(5, 4))
    from postlaunch.regress import pcr_fit_predict

    _, yhat_train, yhat_pred = pcr_fit_predict(X.T, donor_pred, Y.T, rank_override=5, intercept=True)
    design = np.column_stack([np.ones(14), X])
    B = np.linalg.pinv(design) @ Y
    np.testing.assert_allclose(yhat_train, (B[1:].T @ X.T) + B[0][:, None], atol=1e-6)
    np.testing.assert_allclose(yhat_pred, (B[1:].T @ donor_pred) + B[0][:, None], atol=1e-6)


def test_latent_donors_orthonormal_rows():
    rng = np.random.default_rng(33)
    B = rng.normal(size=(9, 14))
    s, vt = latent_donors(B)
    assert s.shape == (9,) and vt.shape == (9, 14)
    np.testing.assert_allclose(vt @ vt.T, np.eye(9), atol=1e-10)
    assert (np.diff(s) <= 1e-12).all()


def planted_rank_matrix(rows, cols, rank, sv_ratio, seed):
    """Orthonormal factors with singular values sv_ratio times the noise edge."""
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.normal(size=(rows, rank)))
    V, _ = np.linalg.qr(rng.normal(size=(cols, rank)))
    edge = np.sqrt(rows) + np.sqrt(cols)
    svs = sv_ratio * edge * np.linspace(1.0, 2.0, rank)
    return U @ np.diag(svs) @ V.T + rng.normal(size=(rows, cols))


def test_hard_threshold_recovers_planted_rank():
    hits = 0
    for seed in range(20):
        M = planted_rank_matrix(200, 50, 3, sv_ratio=10.0, seed=seed)
        s, _ = latent_donors(M)
        hits += hard_threshold_rank(s, 200, 50) == 3
    assert hits >= 19


def test_hard_threshold_validation():
    with pytest.raises(ConfigInvalid):
        hard_threshold_rank(np.array([1.0, 2.0]), 5, 5)  # increasing
    with pytest.raises(ConfigInvalid):
        hard_threshold_rank(np.array([]), 5, 5)
    assert hard_threshold_rank(np.array([1e-12, 1e-13]), 10, 10) == 1  # floor


def test_pcr_ridge_small_lambda_matches_pcr():
    panel = make_factor_panel(noise=0.0, seed=7)
    donors = panel.donors[:6]
    a = fit_predict(panel, donors, ModelSpec("pcr_ridge", {"lam": 1e-10}))
    b = pcr_predict(panel, donors, rank_override=int(np.linalg.matrix_rank(panel.outcomes[donors, :16])))
    np.testing.assert_allclose(a.yhat_post, b.yhat_post, atol=1e-5)


def test_noiseless_factor_panel_recovered_exactly():
    """Donors span the factor space, so linear fits recover Y(0) exactly."""
    panel = make_factor_panel(noise=0.0, seed=1, r=3)
    donors = panel.donors
    truth = panel.outcomes[panel.treated][:, 16:]
    for spec in (ModelSpec("ridge", {"lam": 1e-10}), ModelSpec("pcr", {"rank": 3})):
        pred = fit_predict(panel, donors, spec)
        rel = np.abs(pred.yhat_post - truth).sum() / np.abs(truth).sum()
        assert rel < 1e-6


def test_center_column_mode_shifts_with_donor_mean():
    panel = make_factor_panel(noise=0.01, seed=3)
    donors = panel.donors
    plain = fit_predict(panel, donors, ModelSpec("pcr", {"rank": 3}), center="none")
    centered = fit_predict(panel, donors, ModelSpec("pcr", {"rank": 3}), center="column")
    assert np.isfinite(centered.yhat_post).all()
    assert not np.allclose(plain.yhat_post, centered.yhat_post)
    with pytest.raises(ConfigInvalid):
        fit_predict(panel, donors, ModelSpec("pcr", {"rank": 3}), center="rows")


# ---------------------------------------------------------------------------
# ModelSpec / fit_predict plumbing


def test_model_spec_validation():
    with pytest.raises(ConfigInvalid):
        ModelSpec("boost", {})
    with pytest.raises(ConfigInvalid):
        ModelSpec("knn", {})
    with pytest.raises(ConfigInvalid):
        ModelSpec("ridge", {"k": 3})
    with pytest.raises(ConfigInvalid):
        ModelSpec("ridge", {"lam": -2.0})
    assert ModelSpec("ridge", {"lam": 10.0}).label == "ridge(lam=10)"
    assert ModelSpec("knn", {"k": 5}).label == "knn(k=5)"
    assert ModelSpec("pcr", {}).label == "pcr"
    assert ModelSpec("pcr", {"rank": 2}).hyper_value == 2.0


def test_fit_predict_column_plumbing(factor_panel):
    donors = factor_panel.donors
    train = np.arange(10)
    val = np.arange(10, 16)
    pred = fit_predict(factor_panel, donors, ModelSpec("ridge", {"lam": 1.0}),
                       train_cols=train, pred_cols=val)
    assert pred.yhat_pre.shape == (4, 10)
    assert pred.yhat_post.shape == (4, 6)
    np.testing.assert_array_equal(pred.train_cols, train)
    np.testing.assert_array_equal(pred.pred_cols, val)
    assert pred.model.feature_kind == "donor"
    latent = fit_predict(factor_panel, donors, ModelSpec("pcr", {}))
    assert latent.model.feature_kind == "latent"
    assert latent.model.basis is not None


def test_fit_predict_empty_donors(factor_panel):
    with pytest.raises(TooFewDonors):
        fit_predict(factor_panel, np.array([], dtype=int), ModelSpec("ridge", {"lam": 1.0}))


def test_knn_predict_wrapper(factor_panel):
    pred = knn_predict(factor_panel, factor_panel.donors, 3)
    assert pred.yhat_post.shape == (4, 8)
    assert pred.model.spec.method == "knn"


def test_linear_predict_shape():
    rng = np.random.default_rng(41)
    X = rng.normal(size=(12, 5))
    Y = rng.normal(size=(12, 2))
    model = ridge_fit(X.T, Y.T, 1.0)
    out = linear_predict(model, rng.normal(size=(5, 7)))
    assert out.shape == (2, 7)
