"""Loss metrics, temporal cross-validation, and model selection.

Selection never touches post-period columns: folds are carved out of
the pre-period tail (single holdout or rolling windows), because the
data is non-stationary and random column folds would leak future
structure into training.

The selection criterion is relative error plus a penalized absolute
mean bias; alpha=0 recovers pure relative-error ranking and alpha
around 20 trades a little accuracy for a large bias reduction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllCandidatesFailed,
    ConfigInvalid,
    InsufficientColumns,
    PostLaunchError,
    ShapeMismatch,
    ZeroActualNorm,
)
from .panel import PanelMatrix
from .regress import ModelSpec, fit_predict

DEFAULT_ALPHA = 20.0
ALPHA_SWEEP = (0.0, 1.0, 5.0, 10.0, 20.0, 50.0)
LAMBDA_GRID = tuple(float(x) for x in np.logspace(-4, 4, 17))
# coordinate-descent families get a floored grid: below ~1e-1 on a wide
# donor union the CD solve is underdetermined and burns the sweep cap
# without converging, so those candidates cost seconds and win nothing
L1_LAMBDA_GRID = tuple(float(x) for x in np.logspace(-1, 4, 11))
KNN_GRID = (1, 2, 5, 10, 20)

# simpler methods win ties: fewer knobs, fewer ways to overfit
_METHOD_ORDER = {"knn": 0, "pcr": 1, "ridge": 2, "pcr_ridge": 3, "pcr_lasso": 4, "lasso": 5}


@dataclass(frozen=True)
class LossReport:
    relative_error: float
    bias: float
    combined: float
    alpha: float
    norm: str

    def __post_init__(self):
        if self.relative_error < 0:
            raise ConfigInvalid("relative_error must be nonnegative")
        if abs(self.combined - (self.relative_error + self.alpha * abs(self.bias))) > 1e-12:
            raise ConfigInvalid("combined loss inconsistent with its components")


@dataclass(frozen=True)
class CvFold:
    train_cols: np.ndarray
    val_cols: np.ndarray


@dataclass(frozen=True)
class CvPlan:
    folds: tuple[CvFold, ...]
    scheme: str
    t0: int

    def __post_init__(self):
        for fold in self.folds:
            if fold.train_cols.size == 0 or fold.val_cols.size == 0:
                raise ConfigInvalid("empty fold ranges")
            if fold.train_cols.max() >= fold.val_cols.min():
                raise ConfigInvalid("validation columns must come strictly after train columns")
            if fold.val_cols.max() >= self.t0:
                raise ConfigInvalid("fold columns must stay inside the pre-period")

    def describe(self) -> str:
        parts = []
        for fold in self.folds:
            tr, va = fold.train_cols, fold.val_cols
            parts.append(f"train {tr[0] + 1}-{tr[-1] + 1} / validate {va[0] + 1}-{va[-1] + 1}")
        return f"{self.scheme}: " + "; ".join(parts)


@dataclass(frozen=True)
class SelectionResult:
    best: ModelSpec
    leaderboard: tuple[tuple[ModelSpec, LossReport], ...]
    cv_plan: CvPlan
    fold_reports: dict  # spec label -> tuple of per-fold LossReport
    failures: dict  # spec label -> error message, for candidates that errored

    def __post_init__(self):
        if not self.leaderboard:
            raise ConfigInvalid("leaderboard must be nonempty")
        if self.leaderboard[0][0] != self.best:
            raise ConfigInvalid("best must equal the leaderboard head")


def relative_error(prediction: np.ndarray, actual: np.ndarray, norm: str = "l1") -> float:
    """‖prediction − actual‖ / ‖actual‖ with an l1 or Frobenius norm."""
    prediction = np.asarray(prediction, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if prediction.shape != actual.shape:
        raise ShapeMismatch(f"prediction {prediction.shape} vs actual {actual.shape}")
    if norm == "l1":
        denom = np.abs(actual).sum()
        num = np.abs(prediction - actual).sum()
    elif norm == "frobenius":
        denom = np.sqrt((actual**2).sum())
        num = np.sqrt(((prediction - actual) ** 2).sum())
    else:
        raise ConfigInvalid(f"unknown norm {norm!r}")
    if denom == 0:
        raise ZeroActualNorm("actual values have zero norm")
    return float(num / denom)


def bias(prediction: np.ndarray, actual: np.ndarray) -> float:
    """Mean of (actual − prediction) over all entries; sign matters."""
    prediction = np.asarray(prediction, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if prediction.shape != actual.shape:
        raise ShapeMismatch(f"prediction {prediction.shape} vs actual {actual.shape}")
    if actual.size == 0:
        raise ConfigInvalid("empty arrays")
    return float((actual - prediction).mean())


def debiased_loss(prediction, actual, alpha: float = DEFAULT_ALPHA, norm: str = "l1") -> LossReport:
    """Relative error plus alpha times the absolute mean bias."""
    if alpha < 0:
        raise ConfigInvalid("alpha must be >= 0")
    rel = relative_error(prediction, actual, norm)
    b = bias(prediction, actual)
    return LossReport(rel, b, rel + alpha * abs(b), alpha, norm)


def make_cv_plan(t0: int, scheme: str = "holdout_tail", folds: int = 3, val_width: int = 8) -> CvPlan:
    """Temporal folds inside the pre-period.

    holdout_tail: one fold, validating on the last val_width pre-period
    columns. rolling: `folds` consecutive tail windows of val_width,
    each trained on everything before it.
    """
    if folds < 1 or val_width < 1:
        raise ConfigInvalid("folds and val_width must be >= 1")
    if scheme == "holdout_tail":
        if t0 - val_width < 1:
            raise InsufficientColumns(f"t0={t0} leaves no training columns for val_width={val_width}")
        fold = CvFold(np.arange(t0 - val_width), np.arange(t0 - val_width, t0))
        return CvPlan((fold,), scheme, t0)
    if scheme == "rolling":
        if t0 - folds * val_width < 1:
            raise InsufficientColumns(
                f"t0={t0} leaves no training columns for {folds} folds of width {val_width}"
            )
        out = []
        for f in range(folds):
            val_start = t0 - (folds - f) * val_width
            out.append(CvFold(np.arange(val_start), np.arange(val_start, val_start + val_width)))
        return CvPlan(tuple(out), scheme, t0)
    raise ConfigInvalid(f"unknown cv scheme {scheme!r}")


def default_candidates(n_donors: int | None = None) -> list[ModelSpec]:
    """Grid covering every method: loga-spaced λ, small k set, auto-rank PCR."""
    out: list[ModelSpec] = []
    for k in KNN_GRID:
        if n_donors is None or k <= n_donors:
            out.append(ModelSpec("knn", {"k": k}))
    out.append(ModelSpec("pcr", {}))
    for method in ("ridge", "pcr_ridge"):
        for lam in LAMBDA_GRID:
            out.append(ModelSpec(method, {"lam": lam}))
    for method in ("pcr_lasso", "lasso"):
        for lam in L1_LAMBDA_GRID:
            out.append(ModelSpec(method, {"lam": lam}))
    return out


def _default_predict(panel, donors, spec, train_cols, pred_cols, center):
    pred = fit_predict(
        panel, donors, spec, train_cols=train_cols, pred_cols=pred_cols, center=center
    )
    return pred.yhat_post


def _score_candidate(panel, donors, spec, plan, alpha, norm, center, predict_fn):
    reports = []
    for fold in plan.folds:
        assert fold.val_cols.max() < panel.t0  # selection never sees post-period columns
        yhat = predict_fn(panel, donors, spec, fold.train_cols, fold.val_cols, center)
        actual = panel.outcomes[np.ix_(panel.treated, fold.val_cols)]
        reports.append(debiased_loss(yhat, actual, alpha, norm))
    mean_rel = float(np.mean([r.relative_error for r in reports]))
    mean_bias = float(np.mean([r.bias for r in reports]))
    agg = LossReport(mean_rel, mean_bias, mean_rel + alpha * abs(mean_bias), alpha, norm)
    return agg, tuple(reports)


def select_model(
    panel: PanelMatrix,
    donors,
    candidates=None,
    plan: CvPlan | None = None,
    alpha: float = DEFAULT_ALPHA,
    norm: str = "l1",
    center: str = "none",
    threads: int = 1,
    predict_fn=None,
) -> SelectionResult:
    """Score every candidate on the CV plan and rank by combined loss.

    Per-fold relative error and bias are averaged across folds and the
    combined loss recomputed from the averages (equal-width folds make
    the averaged bias identical to the pooled one). Ties break toward
    smaller |bias|, then the simpler method, then the smaller
    hyperparameter, so parallel evaluation cannot change the winner.

    predict_fn(panel, donors, spec, train_cols, pred_cols, center)
    overrides how a candidate produces validation predictions; the
    per-unit pipeline mode uses it to score each candidate on each
    treated unit's own matched donors instead of the pooled set.
    """
    donors = np.asarray(list(donors), dtype=np.intp)
    if candidates is None:
        candidates = default_candidates(donors.size)
    candidates = list(candidates)
    if not candidates:
        raise ConfigInvalid("no candidates to evaluate")
    if plan is None:
        plan = make_cv_plan(panel.t0)
    if predict_fn is None:
        predict_fn = _default_predict

    results: list = [None] * len(candidates)

    def run(idx_spec):
        idx, spec = idx_spec
        try:
            results[idx] = _score_candidate(
                panel, donors, spec, plan, alpha, norm, center, predict_fn
            )
        except PostLaunchError as exc:
            results[idx] = exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, enumerate(candidates)))
    else:
        for item in enumerate(candidates):
            run(item)

    scored = []
    fold_reports = {}
    failures = {}
    for spec, res in zip(candidates, results):
        if isinstance(res, PostLaunchError):
            failures[spec.label] = f"{type(res).__name__}: {res}"
            continue
        agg, per_fold = res
        scored.append((spec, agg))
        fold_reports[spec.label] = per_fold
    if not scored:
        raise AllCandidatesFailed(
            "every candidate errored: " + "; ".join(f"{k} -> {v}" for k, v in sorted(failures.items()))
        )

    def sort_key(item):
        spec, rep = item
        return (rep.combined, abs(rep.bias), _METHOD_ORDER[spec.method], spec.hyper_value)

    leaderboard = tuple(sorted(scored, key=sort_key))
    return SelectionResult(leaderboard[0][0], leaderboard, plan, fold_reports, failures)
