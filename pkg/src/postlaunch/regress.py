"""Phase 2: vertical-regression counterfactual predictors.

Everything here works in the vertical framing: time periods are the
observations and donor units (or latent donors from an SVD) are the
features, so a fit learns per-treated-unit weights over donors from the
pre-period columns and applies them to post-period donor columns.

Predictors: kNN on pre-period outcome rows, multi-task Ridge (closed
form, one Gram factorization shared across all treated units), Lasso
(cyclic coordinate descent), PCR with hard-threshold rank selection
(Gavish & Donoho 2014), and PCRRidge / PCRLasso which keep every latent
donor and regularize instead of truncating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit

from .errors import ConfigInvalid, SingularSystem, TooFewDonors
from .panel import PanelMatrix

LASSO_TOL = 1e-7
LASSO_MAX_SWEEPS = 10_000

_HYPER_KEYS = {
    "knn": {"k"},
    "ridge": {"lam"},
    "lasso": {"lam"},
    "pcr": {"rank"},
    "pcr_ridge": {"lam"},
    "pcr_lasso": {"lam"},
}


@dataclass(frozen=True, eq=True)
class ModelSpec:
    """A predictor family plus its hyperparameters.

    hyper keys: ``k`` (knn), ``lam`` (ridge/lasso/pcr_ridge/pcr_lasso),
    ``rank`` (pcr; omit to auto-select by hard thresholding).
    """

    method: str
    hyper: dict = field(default_factory=dict)
    intercept: bool = True

    def __post_init__(self):
        if self.method not in _HYPER_KEYS:
            raise ConfigInvalid(f"unknown method {self.method!r}")
        extra = set(self.hyper) - _HYPER_KEYS[self.method]
        if extra:
            raise ConfigInvalid(f"{self.method} does not accept hyperparameters {sorted(extra)}")
        if "lam" in self.hyper and not self.hyper["lam"] >= 0:
            raise ConfigInvalid("lam must be >= 0")
        if "k" in self.hyper and not self.hyper["k"] >= 1:
            raise ConfigInvalid("k must be >= 1")
        if self.method == "knn" and "k" not in self.hyper:
            raise ConfigInvalid("knn requires hyperparameter k")
        if self.method in ("ridge", "lasso", "pcr_ridge", "pcr_lasso") and "lam" not in self.hyper:
            raise ConfigInvalid(f"{self.method} requires hyperparameter lam")
        if "rank" in self.hyper and not self.hyper["rank"] >= 1:
            raise ConfigInvalid("rank must be >= 1")

    @property
    def hyper_value(self) -> float:
        """Scalar used for reporting and deterministic tie-breaking."""
        for key in ("k", "lam", "rank"):
            if key in self.hyper:
                return float(self.hyper[key])
        return 0.0

    @property
    def label(self) -> str:
        if not self.hyper:
            return self.method
        key = next(iter(_HYPER_KEYS[self.method]))
        if key in self.hyper:
            val = self.hyper[key]
            return f"{self.method}({key}={val:g})" if isinstance(val, float) else f"{self.method}({key}={val})"
        return self.method

    def to_config(self) -> dict:
        out = {"method": self.method, "intercept": self.intercept}
        out.update(self.hyper)
        return out


@dataclass(frozen=True)
class FittedModel:
    """Per-treated-unit weights over donor (or latent-donor) features.

    coefficients has one column per treated unit; basis holds the top
    rows of V^T for PCR-family fits (None otherwise); converged is only
    ever False for coordinate-descent fits that hit the sweep cap.
    """

    spec: ModelSpec
    coefficients: np.ndarray  # (n_features, n_treated)
    intercepts: np.ndarray  # (n_treated,)
    feature_kind: str  # "donor" | "latent"
    basis: np.ndarray | None = None  # (k, T0) rows of V^T for PCR variants
    train_cols: np.ndarray | None = None
    converged: bool = True

    @property
    def n_features(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class CounterfactualPrediction:
    """Predicted untreated outcomes for the treated block.

    yhat_pre is the in-sample fit over the training columns; yhat_post
    covers the prediction columns (the post-period in a standard run,
    a validation window during cross-validation).
    """

    yhat_post: np.ndarray  # (n_treated, n_pred_cols)
    yhat_pre: np.ndarray  # (n_treated, n_train_cols)
    model: FittedModel
    train_cols: np.ndarray | None = None
    pred_cols: np.ndarray | None = None

    def __post_init__(self):
        if np.isnan(self.yhat_post).any() or np.isnan(self.yhat_pre).any():
            raise ConfigInvalid("prediction contains NaN")


def _center(X: np.ndarray, Y: np.ndarray, intercept: bool):
    """Demean design rows/targets for an unpenalized intercept."""
    if not intercept:
        d = X.shape[1]
        return X, Y, np.zeros(d), np.zeros(Y.shape[1])
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    return X - xm, Y - ym, xm, ym


# ---------------------------------------------------------------------------
# kNN on pre-period outcome rows


def nearest_donor_rows(donor_train: np.ndarray, target_row: np.ndarray, k: int) -> np.ndarray:
    """Positions (into donor_train) of the k nearest rows, deterministic ties."""
    dists = np.linalg.norm(donor_train - target_row, axis=1)
    order = np.lexsort((np.arange(dists.size), dists))
    return order[:k]


def knn_fit(
    donor_train: np.ndarray,
    treated_train: np.ndarray,
    k: int,
) -> FittedModel:
    """Record each treated unit's k nearest donors as uniform weights."""
    if k > donor_train.shape[0]:
        raise TooFewDonors(f"k={k} exceeds donor count {donor_train.shape[0]}")
    n = treated_train.shape[0]
    W = np.zeros((donor_train.shape[0], n))
    for i in range(n):
        sel = nearest_donor_rows(donor_train, treated_train[i], k)
        W[sel, i] = 1.0 / k
    spec = ModelSpec("knn", {"k": int(k)})
    return FittedModel(spec, W, np.zeros(n), "donor")


def knn_predict_matrix(model: FittedModel, donor_any: np.ndarray) -> np.ndarray:
    """Average the selected donors' rows over the given columns."""
    k = model.spec.hyper["k"]
    n = model.coefficients.shape[1]
    out = np.empty((n, donor_any.shape[1]))
    for i in range(n):
        sel = np.flatnonzero(model.coefficients[:, i])
        if sel.size == 1:
            out[i] = donor_any[sel[0]]  # bit-exact single-neighbor copy
        else:
            out[i] = donor_any[sel].mean(axis=0)
    assert k >= 1
    return out


# ---------------------------------------------------------------------------
# Ridge: multi-task closed form


def ridge_fit(donor_pre: np.ndarray, treated_pre: np.ndarray, lam: float, intercept: bool = True) -> FittedModel:
    """Minimize ‖y − Bᵀw − c‖² + λ‖w‖² per treated row, shared factorization.

    B is the donor pre-period submatrix (donors × periods); the Gram
    matrix (donor-space when donors ≤ periods, period-space otherwise)
    is factorized once and reused for every treated unit. λ=0 on a
    rank-deficient Gram raises SingularSystem rather than silently
    switching to a pseudo-inverse.
    """
    if lam < 0:
        raise ConfigInvalid("lam must be >= 0")
    X = np.ascontiguousarray(donor_pre.T, dtype=np.float64)  # (T0, d)
    Y = np.ascontiguousarray(treated_pre.T, dtype=np.float64)  # (T0, n)
    Xc, Yc, xm, ym = _center(X, Y, intercept)
    T0, d = Xc.shape
    try:
        if d <= T0:
            G = Xc.T @ Xc
            G[np.diag_indices_from(G)] += lam
            cf = scipy.linalg.cho_factor(G, lower=True)
            W = scipy.linalg.cho_solve(cf, Xc.T @ Yc)
        else:
            K = Xc @ Xc.T
            K[np.diag_indices_from(K)] += lam
            cf = scipy.linalg.cho_factor(K, lower=True)
            W = Xc.T @ scipy.linalg.cho_solve(cf, Yc)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(
            "Gram matrix is rank-deficient at lam=0; increase lam or reduce donors"
        ) from exc
    intercepts = ym - xm @ W
    spec = ModelSpec("ridge", {"lam": float(lam)}, intercept=intercept)
    return FittedModel(spec, W, intercepts, "donor")


def linear_predict(model: FittedModel, donor_any: np.ndarray) -> np.ndarray:
    """Apply donor-space weights to donor columns: Ŷ = Wᵀ B + c."""
    return (model.coefficients.T @ donor_any) + model.intercepts[:, None]


# ---------------------------------------------------------------------------
# Lasso: cyclic coordinate descent (numba)


@njit(cache=True)
def _cd_lasso(X, Y, lam, max_sweeps, tol):  # pragma: no cover - exercised via lasso_fit
    T0, d = X.shape
    n = Y.shape[1]
    W = np.zeros((d, n))
    R = Y.copy()
    col_ssq = np.zeros(d)
    for j in range(d):
        s = 0.0
        for t in range(T0):
            s += X[t, j] * X[t, j]
        col_ssq[j] = s
    thresh = lam * T0
    sweeps = 0
    converged = False
    for _ in range(max_sweeps):
        sweeps += 1
        max_delta = 0.0
        for j in range(d):
            ssq = col_ssq[j]
            if ssq <= 0.0:
                continue
            for m in range(n):
                w_old = W[j, m]
                rho = w_old * ssq
                for t in range(T0):
                    rho += X[t, j] * R[t, m]
                if rho > thresh:
                    w_new = (rho - thresh) / ssq
                elif rho < -thresh:
                    w_new = (rho + thresh) / ssq
                else:
                    w_new = 0.0
                delta = w_new - w_old
                if delta != 0.0:
                    for t in range(T0):
                        R[t, m] -= X[t, j] * delta
                    W[j, m] = w_new
                    if abs(delta) > max_delta:
                        max_delta = abs(delta)
        if max_delta < tol:
            converged = True
            break
    return W, sweeps, converged


def lasso_fit(donor_pre: np.ndarray, treated_pre: np.ndarray, lam: float, intercept: bool = True) -> FittedModel:
    """Minimize ½‖y − Bᵀw − c‖²/T0 + λ‖w‖₁ per treated row.

    Cyclic coordinate descent, convergence when the largest coefficient
    change in a sweep drops below 1e-7, capped at 10,000 sweeps; a fit
    that hits the cap is returned with converged=False rather than
    raised, so model selection can still rank it.
    """
    if lam < 0:
        raise ConfigInvalid("lam must be >= 0")
    X = np.ascontiguousarray(donor_pre.T, dtype=np.float64)
    Y = np.ascontiguousarray(treated_pre.T, dtype=np.float64)
    Xc, Yc, xm, ym = _center(X, Y, intercept)
    W, _, converged = _cd_lasso(
        np.ascontiguousarray(Xc), np.ascontiguousarray(Yc), float(lam), LASSO_MAX_SWEEPS, LASSO_TOL
    )
    intercepts = ym - xm @ W
    spec = ModelSpec("lasso", {"lam": float(lam)}, intercept=intercept)
    return FittedModel(spec, W, intercepts, "donor", converged=bool(converged))


def lasso_lambda_max(donor_pre: np.ndarray, treated_pre: np.ndarray, intercept: bool = True) -> float:
    """Smallest λ at which every coefficient is exactly zero: ‖B ỹ‖_∞/T0."""
    X = donor_pre.T.astype(np.float64)
    Y = treated_pre.T.astype(np.float64)
    Xc, Yc, _, _ = _center(X, Y, intercept)
    return float(np.abs(Xc.T @ Yc).max() / Xc.shape[0])


# ---------------------------------------------------------------------------
# PCR family


def latent_donors(donor_pre: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin SVD of the donor pre-period submatrix → (singular values, Vᵀ).

    Rows of Vᵀ are the latent donors: orthonormal time-series that span
    the donor row space over the training columns.
    """
    if donor_pre.size == 0:
        raise ConfigInvalid("empty donor matrix")
    _, s, vt = np.linalg.svd(np.asarray(donor_pre, dtype=np.float64), full_matrices=False)
    return s, vt


def hard_threshold_rank(singular_values, rows: int, cols: int) -> int:
    """Optimal hard threshold for singular values under white noise.

    Uses the Gavish & Donoho (2014) median-based rule with the cubic
    approximation of ω(β): keep values above ω(β)·median(σ), β the
    aspect ratio, floored at rank 1 so downstream fits always have at
    least one latent donor.
    """
    s = np.asarray(singular_values, dtype=np.float64)
    if s.size == 0 or np.any(np.diff(s) > 0):
        raise ConfigInvalid("singular values must be nonincreasing and nonempty")
    beta = min(rows, cols) / max(rows, cols)
    omega = 0.56 * beta**3 - 0.95 * beta**2 + 1.82 * beta + 1.43
    tau = omega * np.median(s)
    return max(int(np.sum(s > tau)), 1)


def _svd_features(donor_train: np.ndarray, donor_pred: np.ndarray, center: str):
    """SVD pieces plus optional per-column donor-mean removal.

    center="column" subtracts each period's donor mean before the SVD
    and adds it back to predictions, so the latent fit explains
    deviations around the donor mean path.
    """
    if center == "column":
        m_train = donor_train.mean(axis=0)
        m_pred = donor_pred.mean(axis=0)
        donor_train = donor_train - m_train
        donor_pred = donor_pred - m_pred
    elif center == "none":
        m_train = np.zeros(donor_train.shape[1])
        m_pred = np.zeros(donor_pred.shape[1])
    else:
        raise ConfigInvalid(f"unknown center mode {center!r}")
    u, s, vt = np.linalg.svd(donor_train, full_matrices=False)
    return u, s, vt, donor_pred, m_train, m_pred


def _latent_pred_values(u: np.ndarray, s: np.ndarray, donor_pred: np.ndarray, k: int) -> np.ndarray:
    """Latent donor values over prediction columns: Σ_k⁻¹ U_kᵀ B_pred.

    The latent basis is learned on training columns; projecting the
    donor prediction columns through (UΣ)⁺ extends each latent donor's
    series, keeping post-period donor outcomes the drivers of
    post-period predictions.
    """
    cutoff = s[0] * 1e-12  # zero modes (rank_override past the true rank) contribute nothing
    keep = s[:k] > cutoff
    inv = np.where(keep, 1.0 / np.where(keep, s[:k], 1.0), 0.0)
    return inv[:, None] * (u[:, :k].T @ donor_pred)


def pcr_fit_predict(
    donor_train: np.ndarray,
    donor_pred: np.ndarray,
    treated_train: np.ndarray,
    rank_override: int | None = None,
    intercept: bool = True,
    center: str = "none",
) -> tuple[FittedModel, np.ndarray, np.ndarray]:
    """PCR: least squares of treated rows on the top-k latent donors."""
    u, s, vt, donor_pred_c, m_train, m_pred = _svd_features(donor_train, donor_pred, center)
    if rank_override is not None:
        if not 1 <= rank_override <= s.size:
            raise ConfigInvalid(f"rank override {rank_override} outside [1, {s.size}]")
        k = int(rank_override)
    else:
        k = hard_threshold_rank(s, *donor_train.shape)
    X = vt[:k].T  # (T0, k)
    Y = treated_train.T
    Xc, Yc, xm, ym = _center(X, Y, intercept)
    W, *_ = np.linalg.lstsq(Xc, Yc, rcond=None)
    intercepts = ym - xm @ W
    spec = ModelSpec("pcr", {"rank": k} if rank_override is not None else {}, intercept=intercept)
    model = FittedModel(spec, W, intercepts, "latent", basis=vt[:k])
    L_pred = _latent_pred_values(u, s, donor_pred_c, k)
    yhat_pred = (W.T @ L_pred) + intercepts[:, None] + m_pred
    yhat_train = (W.T @ vt[:k]) + intercepts[:, None] + m_train
    return model, yhat_train, yhat_pred


def pcr_shrink_fit_predict(
    donor_train: np.ndarray,
    donor_pred: np.ndarray,
    treated_train: np.ndarray,
    lam: float,
    method: str,
    intercept: bool = True,
    center: str = "none",
) -> tuple[FittedModel, np.ndarray, np.ndarray]:
    """PCRRidge / PCRLasso: keep all latent donors, regularize instead.

    Features are Σ-weighted rows of Vᵀ (principal-component scores), so
    the penalty respects donor-space geometry; prediction-column
    features are then simply Uᵀ B_pred.
    """
    u, s, vt, donor_pred_c, m_train, m_pred = _svd_features(donor_train, donor_pred, center)
    F_train = s[:, None] * vt  # (r, T0) = Uᵀ B_train
    F_pred = u.T @ donor_pred_c  # (r, n_pred)
    if method == "pcr_ridge":
        inner = ridge_fit(F_train, treated_train, lam, intercept)
    elif method == "pcr_lasso":
        inner = lasso_fit(F_train, treated_train, lam, intercept)
    else:
        raise ConfigInvalid(f"unknown PCR shrinkage method {method!r}")
    spec = ModelSpec(method, {"lam": float(lam)}, intercept=intercept)
    model = FittedModel(
        spec, inner.coefficients, inner.intercepts, "latent", basis=vt, converged=inner.converged
    )
    yhat_pred = linear_predict(model, F_pred) + m_pred
    yhat_train = linear_predict(model, F_train) + m_train
    return model, yhat_train, yhat_pred


# ---------------------------------------------------------------------------
# Unified entry point


def fit_predict(
    panel: PanelMatrix,
    donors,
    spec: ModelSpec,
    train_cols=None,
    pred_cols=None,
    center: str = "none",
    treated_rows=None,
) -> CounterfactualPrediction:
    """Fit one predictor on training columns and predict other columns.

    Defaults reproduce the standard run (train on the full pre-period,
    predict the post-period); cross-validation passes pre-period subsets
    for both. center applies to PCR-family methods only.
    """
    donors = np.asarray(list(donors), dtype=np.intp)
    if donors.size == 0:
        raise TooFewDonors("empty donor set")
    treated = panel.treated if treated_rows is None else np.asarray(list(treated_rows), dtype=np.intp)
    train_cols = np.arange(panel.t0) if train_cols is None else np.asarray(list(train_cols), dtype=np.intp)
    pred_cols = (
        np.arange(panel.t0, panel.n_periods) if pred_cols is None else np.asarray(list(pred_cols), dtype=np.intp)
    )
    donor_train = panel.outcomes[np.ix_(donors, train_cols)]
    donor_pred = panel.outcomes[np.ix_(donors, pred_cols)]
    treated_train = panel.outcomes[np.ix_(treated, train_cols)]

    method = spec.method
    if method == "knn":
        model = knn_fit(donor_train, treated_train, spec.hyper["k"])
        yhat_pre = knn_predict_matrix(model, donor_train)
        yhat_post = knn_predict_matrix(model, donor_pred)
    elif method == "ridge":
        model = ridge_fit(donor_train, treated_train, spec.hyper["lam"], spec.intercept)
        yhat_pre = linear_predict(model, donor_train)
        yhat_post = linear_predict(model, donor_pred)
    elif method == "lasso":
        model = lasso_fit(donor_train, treated_train, spec.hyper["lam"], spec.intercept)
        yhat_pre = linear_predict(model, donor_train)
        yhat_post = linear_predict(model, donor_pred)
    elif method == "pcr":
        model, yhat_pre, yhat_post = pcr_fit_predict(
            donor_train, donor_pred, treated_train, spec.hyper.get("rank"), spec.intercept, center
        )
    elif method in ("pcr_ridge", "pcr_lasso"):
        model, yhat_pre, yhat_post = pcr_shrink_fit_predict(
            donor_train, donor_pred, treated_train, spec.hyper["lam"], method, spec.intercept, center
        )
    else:  # pragma: no cover - ModelSpec already validates
        raise ConfigInvalid(f"unknown method {method!r}")

    model = FittedModel(
        model.spec,
        model.coefficients,
        model.intercepts,
        model.feature_kind,
        basis=model.basis,
        train_cols=train_cols,
        converged=model.converged,
    )
    return CounterfactualPrediction(yhat_post, yhat_pre, model, train_cols, pred_cols)


def knn_predict(panel: PanelMatrix, donors, k: int, **kw) -> CounterfactualPrediction:
    return fit_predict(panel, donors, ModelSpec("knn", {"k": int(k)}), **kw)


def pcr_predict(panel: PanelMatrix, donors, rank_override: int | None = None, **kw) -> CounterfactualPrediction:
    hyper = {} if rank_override is None else {"rank": int(rank_override)}
    return fit_predict(panel, donors, ModelSpec("pcr", hyper), **kw)


def pcr_ridge_predict(panel: PanelMatrix, donors, lam: float, **kw) -> CounterfactualPrediction:
    return fit_predict(panel, donors, ModelSpec("pcr_ridge", {"lam": float(lam)}), **kw)


def pcr_lasso_predict(panel: PanelMatrix, donors, lam: float, **kw) -> CounterfactualPrediction:
    return fit_predict(panel, donors, ModelSpec("pcr_lasso", {"lam": float(lam)}), **kw)
