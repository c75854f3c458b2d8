"""End-to-end estimation pipeline.

Wires the two phases together: optional donor exclusion/subsampling,
covariate ANN matching (phase 1), temporal-CV model selection and the
final vertical-regression fit (phase 2), then effect estimation with
the chosen inference mode. Every random component draws its seed from
the single pipeline seed, so a config fully determines the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .effects import (
    EffectReport,
    estimate_effects,
    placebo_pvalue,
    report_from_hte,
    sample_split_debias,
)
from .errors import ConfigInvalid, ExcludedIsTreated
from .matching import AnnParams, DonorFilter, build_index, match_donors, subsample_donors
from .panel import CovariateTable, PanelMatrix
from .regress import CounterfactualPrediction, ModelSpec, fit_predict
from .tuning import DEFAULT_ALPHA, SelectionResult, make_cv_plan, select_model


@dataclass(frozen=True)
class PipelineConfig:
    # phase 1
    two_phase: bool = True
    k: int = 10
    trees: int = 8
    leaf_size: int = 32
    metric: str = "euclidean"
    exact_ann: bool = False
    pool_mode: str = "union"  # union | per-unit
    subsample: float | None = None
    exclude_ids: tuple = ()
    # phase 2 selection
    model: ModelSpec | None = None  # fixed model skips selection
    candidates: tuple | None = None  # None -> default grid
    alpha: float = DEFAULT_ALPHA
    norm: str = "l1"
    cv: str = "holdout_tail"  # holdout_tail | rolling
    folds: int = 3
    val_width: int = 8
    center: str = "none"
    train_end: int | None = None  # train on columns [0, train_end); None -> t0
    # inference
    inference: str = "ttest"  # ttest | placebo
    placebo_draws: int = 200
    split_fraction: float | None = None  # enable hold-out-split debiasing
    # run control
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.pool_mode not in ("union", "per-unit"):
            raise ConfigInvalid(f"unknown pool_mode {self.pool_mode!r}")
        if self.inference not in ("ttest", "placebo"):
            raise ConfigInvalid(f"unknown inference mode {self.inference!r}")
        if self.threads < 1:
            raise ConfigInvalid("threads must be >= 1")


@dataclass(frozen=True)
class PipelineResult:
    donors_used: np.ndarray
    spec_used: ModelSpec
    pred: CounterfactualPrediction
    report: EffectReport
    donor_filter: DonorFilter | None = None
    selection: SelectionResult | None = None
    timings: dict = field(default_factory=dict)


def _child_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(stream,)).generate_state(1)[0])


def run_pipeline(
    panel: PanelMatrix,
    covariates: CovariateTable | None,
    config: PipelineConfig,
    eligible_donors=None,
) -> PipelineResult:
    """Run matching, selection, fitting, and effect estimation.

    eligible_donors narrows the starting pool (validation bundles use
    this to keep experimental control units out of every donor set).
    """
    timings: dict = {}
    t_start = time.perf_counter()

    donors = panel.donors if eligible_donors is None else np.unique(
        np.asarray(list(eligible_donors), dtype=np.intp)
    )
    if np.intersect1d(donors, panel.treated).size:
        raise ConfigInvalid("eligible donors overlap the treated set")

    if config.exclude_ids:
        treated = set(int(i) for i in panel.treated)
        drop = set()
        for uid in config.exclude_ids:
            row = panel.index_of(uid)
            if row in treated:
                raise ExcludedIsTreated(uid)
            drop.add(row)
        donors = np.array(sorted(set(int(d) for d in donors) - drop), dtype=np.intp)

    if config.subsample is not None:
        donors = subsample_donors(
            panel, config.subsample, seed=_child_seed(config.seed, 0), eligible=donors
        )

    train_end = panel.t0 if config.train_end is None else int(config.train_end)
    if not 2 <= train_end <= panel.t0:
        raise ConfigInvalid(f"train_end must be in [2, t0], got {train_end}")
    train_cols = np.arange(train_end)
    post_cols = np.arange(panel.t0, panel.n_periods)

    donor_filter = None
    per_unit_pools = None
    if config.two_phase:
        if covariates is None:
            raise ConfigInvalid("two-phase runs require covariates")
        params = AnnParams(
            tree_count=config.trees,
            leaf_size=config.leaf_size,
            metric=config.metric,
            seed=_child_seed(config.seed, 1),
            exact=config.exact_ann,
        )
        index = build_index(covariates, donors, params)
        donor_filter = match_donors(index, covariates, panel.treated, config.k)
        regression_donors = donor_filter.donor_union
        if config.pool_mode == "per-unit":
            per_unit_pools = {
                int(i): np.array(
                    [d for d, _ in donor_filter.neighbors[int(i)]], dtype=np.intp
                )
                for i in panel.treated
            }
    else:
        regression_donors = donors
    timings["match"] = time.perf_counter() - t_start

    def per_unit_predict(p, donor_rows, spec, cols_train, cols_pred, center):
        # each treated unit regressed on its own matched donors; donor_rows
        # (the union) only feeds the shared-model record elsewhere
        out = np.empty((p.treated.size, len(cols_pred)))
        for ii, i in enumerate(p.treated):
            one = fit_predict(
                p,
                per_unit_pools[int(i)],
                spec,
                train_cols=cols_train,
                pred_cols=cols_pred,
                center=center,
                treated_rows=[int(i)],
            )
            out[ii] = one.yhat_post[0]
        return out

    t_sel = time.perf_counter()
    selection = None
    if config.model is not None:
        spec_used = config.model
    else:
        plan = make_cv_plan(train_end, config.cv, config.folds, config.val_width)
        selection = select_model(
            panel,
            regression_donors,
            candidates=config.candidates,
            plan=plan,
            alpha=config.alpha,
            norm=config.norm,
            center=config.center,
            threads=config.threads,
            predict_fn=per_unit_predict if per_unit_pools is not None else None,
        )
        spec_used = selection.best
    timings["tune"] = time.perf_counter() - t_sel

    t_fit = time.perf_counter()

    def final_fit(donor_rows, treated_rows) -> CounterfactualPrediction:
        return fit_predict(
            panel,
            donor_rows,
            spec_used,
            train_cols=train_cols,
            pred_cols=post_cols,
            center=config.center,
            treated_rows=treated_rows,
        )

    if config.split_fraction is not None:
        if per_unit_pools is not None:
            # per-unit flavor of the hold-out correction: every target —
            # treated unit or held-out pseudo-treated donor — is fit on
            # its k nearest donors inside the training split, so the
            # correction mirrors the main per-unit mechanism
            def split_fit(p, donor_rows, target_rows):
                sub_index = build_index(covariates, donor_rows, params)
                targets = np.asarray(list(target_rows), dtype=np.intp)
                sub_k = min(config.k, len(donor_rows))
                sub_filter = match_donors(sub_index, covariates, targets, sub_k)
                rows_post, rows_pre, model = [], [], None
                for t in targets:
                    own = [d for d, _ in sub_filter.neighbors[int(t)]]
                    one = final_fit(own, [int(t)])
                    rows_post.append(one.yhat_post[0])
                    rows_pre.append(one.yhat_pre[0])
                    model = one.model
                return CounterfactualPrediction(
                    np.vstack(rows_post), np.vstack(rows_pre), model, train_cols, post_cols
                )

            fit_fn = split_fit
        else:
            def fit_fn(p, donor_rows, treated_rows):
                return fit_predict(
                    p, donor_rows, spec_used,
                    train_cols=train_cols, pred_cols=post_cols,
                    center=config.center, treated_rows=treated_rows,
                )

        pred = sample_split_debias(
            panel,
            regression_donors,
            spec_used,
            split_fraction=config.split_fraction,
            seed=_child_seed(config.seed, 2),
            fit_fn=fit_fn,
        )
    elif per_unit_pools is not None:
        rows = []
        pre_rows = []
        for i in panel.treated:
            one = final_fit(per_unit_pools[int(i)], [int(i)])
            rows.append(one.yhat_post[0])
            pre_rows.append(one.yhat_pre[0])
        base = final_fit(regression_donors, panel.treated)  # provides the shared model record
        pred = CounterfactualPrediction(
            np.vstack(rows), np.vstack(pre_rows), base.model, train_cols, post_cols
        )
    else:
        pred = final_fit(regression_donors, panel.treated)
    timings["fit"] = time.perf_counter() - t_fit

    t_eff = time.perf_counter()
    report = estimate_effects(panel, pred)
    if config.inference == "placebo":
        p = placebo_pvalue(
            panel,
            regression_donors,
            spec_used,
            report.tau_hat,
            draws=config.placebo_draws,
            seed=_child_seed(config.seed, 3),
            center=config.center,
            threads=config.threads,
        )
        report = report_from_hte(report.hte, se=report.se, p_value=p, inference="placebo")
    timings["effects"] = time.perf_counter() - t_eff
    timings["total"] = time.perf_counter() - t_start

    return PipelineResult(
        donors_used=regression_donors,
        spec_used=spec_used,
        pred=pred,
        report=report,
        donor_filter=donor_filter,
        selection=selection,
        timings=timings,
    )
