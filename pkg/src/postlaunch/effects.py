"""Treatment-effect estimation and inference from counterfactuals.

The effect estimate is the treated-post mean of observed minus
predicted outcomes; the per-(unit, period) differences are kept as the
heterogeneous-effect matrix. Inference treats the unit as the sampling
level — outcomes within a unit are serially dependent, so pooling
(unit, period) cells would understate the standard error.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import (
    BadFraction,
    ConfigInvalid,
    EmptySplit,
    InsufficientDonors,
    ShapeMismatch,
    TooFewUnits,
)
from .panel import PanelMatrix
from .regress import CounterfactualPrediction, ModelSpec, fit_predict

ALPHA_LEVEL = 0.05


@dataclass(frozen=True)
class EffectReport:
    """Effect estimate with unit-level inference and the HTE breakdown."""

    tau_hat: float
    se: float
    p_value: float
    significant: bool
    hte: np.ndarray  # (n, n_post) per-(unit, period) effects
    per_unit_effects: np.ndarray  # (n,) per-unit mean effects
    inference: str = "ttest"

    def __post_init__(self):
        if abs(self.tau_hat - self.hte.mean()) > 1e-10:
            raise ConfigInvalid("tau_hat must equal the mean of the HTE matrix")
        if np.abs(self.per_unit_effects - self.hte.mean(axis=1)).max() > 1e-10:
            raise ConfigInvalid("per-unit effects must be HTE row means")
        if self.significant != (self.p_value < ALPHA_LEVEL):
            raise ConfigInvalid("significance flag inconsistent with p-value")
        if not 0.0 <= self.p_value <= 1.0 or self.se < 0:
            raise ConfigInvalid("p-value must be in [0,1] and se nonnegative")

    def to_dict(self) -> dict:
        return {
            "tau_hat": float(self.tau_hat),
            "se": float(self.se),
            "p_value": float(self.p_value),
            "significant": bool(self.significant),
            "inference": self.inference,
            "n_units": int(self.hte.shape[0]),
            "n_periods": int(self.hte.shape[1]),
        }


def report_from_hte(hte: np.ndarray, se=None, p_value=None, inference: str = "ttest") -> EffectReport:
    """Build a consistent report; inference defaults to the unit-level t-test."""
    hte = np.asarray(hte, dtype=np.float64)
    per_unit = hte.mean(axis=1)
    if se is None or p_value is None:
        se, p_value = infer_pvalue(per_unit)
    return EffectReport(
        float(hte.mean()), float(se), float(p_value), bool(p_value < ALPHA_LEVEL), hte, per_unit, inference
    )


def infer_pvalue(per_unit_effects) -> tuple[float, float]:
    """Two-sided one-sample t-test of the per-unit effects against zero.

    Degenerate-variance rule: se=0 with a nonzero mean is treated as
    p→0 (an exact constant shift), and the all-zero vector as p=1.
    """
    x = np.asarray(per_unit_effects, dtype=np.float64)
    if x.size < 2:
        raise TooFewUnits(f"need at least 2 units for inference, got {x.size}")
    n = x.size
    se = float(x.std(ddof=1) / np.sqrt(n))
    mean = float(x.mean())
    if se == 0.0:
        return 0.0, (1.0 if mean == 0.0 else 0.0)
    t_stat = mean / se
    p = float(2.0 * stats.t.sf(abs(t_stat), df=n - 1))
    return se, p


def welch_two_sample(x, y) -> tuple[float, float, float]:
    """Welch two-sample comparison: (mean(x) − mean(y), se, p-value)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise TooFewUnits("need at least 2 units per group")
    diff = float(x.mean() - y.mean())
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se = float(np.sqrt(vx + vy))
    if se == 0.0:
        return diff, 0.0, (1.0 if diff == 0.0 else 0.0)
    df = (vx + vy) ** 2 / (vx**2 / (x.size - 1) + vy**2 / (y.size - 1))
    p = float(2.0 * stats.t.sf(abs(diff) / se, df=df))
    return diff, se, p


def estimate_effects(panel: PanelMatrix, pred: CounterfactualPrediction) -> EffectReport:
    """Observed minus predicted over the treated post-period block."""
    n_post = panel.n_periods - panel.t0
    if pred.yhat_post.shape != (panel.n_treated, n_post):
        raise ShapeMismatch(
            f"prediction {pred.yhat_post.shape} does not match treated/post block "
            f"({panel.n_treated}, {n_post})"
        )
    observed = panel.outcomes[np.ix_(panel.treated, np.arange(panel.t0, panel.n_periods))]
    return report_from_hte(observed - pred.yhat_post)


def placebo_pvalue(
    panel: PanelMatrix,
    donors,
    spec: ModelSpec,
    tau_hat: float,
    draws: int = 200,
    seed: int = 0,
    center: str = "none",
    threads: int = 1,
) -> float:
    """Rank p-value from pseudo-treated donor subsets.

    Each draw relabels a random donor subset (same size as the treated
    group) as treated, refits on the remaining donors, and records the
    placebo effect; the p-value is the smoothed fraction of placebo
    effects at least as large in magnitude as the observed one.
    """
    donors = np.asarray(list(donors), dtype=np.intp)
    n = panel.n_treated
    if donors.size <= n:
        raise InsufficientDonors(
            f"{donors.size} donors cannot host placebo sets of size {n} with a nonempty remainder"
        )
    if draws < 1:
        raise ConfigInvalid("draws must be >= 1")
    post_cols = np.arange(panel.t0, panel.n_periods)
    seeds = np.random.SeedSequence(seed).spawn(draws)
    taus = np.empty(draws)

    def run(i):
        rng = np.random.default_rng(seeds[i])
        pseudo = np.sort(rng.choice(donors, size=n, replace=False))
        rest = np.setdiff1d(donors, pseudo)
        pred = fit_predict(panel, rest, spec, treated_rows=pseudo, center=center)
        observed = panel.outcomes[np.ix_(pseudo, post_cols)]
        taus[i] = (observed - pred.yhat_post).mean()

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, range(draws)))
    else:
        for i in range(draws):
            run(i)
    exceed = int(np.sum(np.abs(taus) >= abs(tau_hat)))
    return (1 + exceed) / (draws + 1)


def sample_split_debias(
    panel: PanelMatrix,
    donors,
    spec: ModelSpec | None = None,
    split_fraction: float = 0.5,
    seed: int = 0,
    center: str = "none",
    fit_fn=None,
) -> CounterfactualPrediction:
    """Additive bias correction estimated on a held-out donor split.

    The donor pool is split in two; the model trains on split A and
    predicts split B's post-period rows, whose actuals are observed
    because donors are untreated. The per-period mean residual on B is
    then added to the treated predictions — per period rather than as a
    scalar, since prediction bias grows with training-window staleness.

    fit_fn(panel, donor_rows, treated_rows) may replace the standard
    fit for tests; by default it fits `spec` via fit_predict.
    """
    donors = np.asarray(list(donors), dtype=np.intp)
    if donors.size < 2:
        raise EmptySplit("need at least 2 donors to split")
    if not 0.0 < split_fraction < 1.0:
        raise BadFraction(f"split_fraction must be in (0, 1), got {split_fraction}")
    if fit_fn is None:
        if spec is None:
            raise ConfigInvalid("either spec or fit_fn must be given")

        def fit_fn(p, donor_rows, treated_rows):
            return fit_predict(p, donor_rows, spec, treated_rows=treated_rows, center=center)

    n_a = min(max(round(split_fraction * donors.size), 1), donors.size - 1)
    perm = np.random.default_rng(seed).permutation(donors)
    split_a = np.sort(perm[:n_a])
    split_b = np.sort(perm[n_a:])

    pred_b = fit_fn(panel, split_a, split_b)
    post_cols = np.arange(panel.t0, panel.n_periods)
    actual_b = panel.outcomes[np.ix_(split_b, post_cols)]
    correction = (actual_b - pred_b.yhat_post).mean(axis=0)

    pred_t = fit_fn(panel, split_a, panel.treated)
    return CounterfactualPrediction(
        pred_t.yhat_post + correction[None, :],
        pred_t.yhat_pre,
        pred_t.model,
        pred_t.train_cols,
        pred_t.pred_cols,
    )
