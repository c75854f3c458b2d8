"""Validation protocol against experiments with real control groups.

A launched treatment has no control group, so the estimator is
validated on historical experiments that do have one: A/B-ST compares
the synthetic-counterfactual estimate against the experiment's ground
truth, and A/A-ST compares observed control outcomes against the
treated units' counterfactual predictions, where the truth is a zero
effect by construction.

The module also houses the synthetic-panel generator used as the
desk-scale oracle: a low-rank factor model whose loadings are tied to
unit covariates (so covariate matching is informative), with a locally
loaded factor concentrated around the treated covariate subregion
(creating interpolation bias for unmatched donors), optional linear
drift (non-stationarity), and heavy-tailed Student-t noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import tuning
from .effects import (
    EffectReport,
    estimate_effects,
    report_from_hte,
    welch_two_sample,
)
from .errors import ConfigInvalid, EmptyControl, InsufficientColumns
from .panel import CovariateTable, PanelMatrix
from .regress import CounterfactualPrediction
from .pipeline import PipelineConfig, PipelineResult, run_pipeline

SIGNIFICANCE_LEVEL = 0.05

# generator shape constants: treated/control covariate spread around the
# subregion center, the local factor's kernel width (relative to p), its
# amplitude per unit of heterogeneity, and the drift tilt toward units
# loaded on the local factor
TREATED_SPREAD = 0.8
LOCAL_KERNEL_SCALE = 0.5
LOCAL_AMP = 0.6
DRIFT_TILT = 6.0


@dataclass(frozen=True)
class ExperimentBundle:
    """A panel plus covariates and a labeled experimental control group.

    Control units are never eligible donors: they exist to score the
    estimator, and feeding them to it would leak the answer.
    """

    panel: PanelMatrix
    covariates: CovariateTable
    control: np.ndarray  # row indices of control units

    def __post_init__(self):
        control = np.unique(np.asarray(self.control, dtype=np.intp))
        object.__setattr__(self, "control", control)
        if np.intersect1d(control, self.panel.treated).size:
            raise ConfigInvalid("control and treated sets overlap")
        if control.size and (control[0] < 0 or control[-1] >= self.panel.n_units):
            raise ConfigInvalid("control row index out of range")

    @property
    def donor_pool(self) -> np.ndarray:
        """All untreated, non-control rows — the only eligible donors."""
        return np.setdiff1d(self.panel.donors, self.control)


@dataclass(frozen=True)
class ValidationVerdict:
    ab_ground_truth: EffectReport
    ab_st: EffectReport
    aa_st: EffectReport
    ab_st_pass: bool
    aa_st_pass: bool
    model_label: str = ""


@dataclass(frozen=True)
class SimConfig:
    N: int = 5000  # total units (treated + control + donors)
    n: int = 200  # treated units
    T: int = 60
    t0: int = 40
    p: int = 8  # covariate dimension
    r: int = 4  # latent factor rank
    factor_scale: float = 1.0
    noise_scale: float = 0.7
    tau_true: float = 1.0
    heterogeneity: float = 0.5  # distance of the treated subregion from the donor cloud
    treated_spread: float = TREATED_SPREAD  # covariate spread of the experiment population
    drift: float = 0.0  # linear trend magnitude over the full horizon
    drift_tilt: float = DRIFT_TILT  # how much steeper the trend is for locally loaded units
    loading_noise: float = 0.4  # idiosyncratic (covariate-independent) loading spread
    n_control: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.n_control < 0:
            raise ConfigInvalid("need n >= 1 treated and n_control >= 0 control units")
        if self.N - self.n - self.n_control < 2:
            raise ConfigInvalid("config leaves fewer than 2 donor units")
        if not 1 <= self.t0 < self.T:
            raise ConfigInvalid("need 1 <= t0 < T")
        if self.r > min(self.N, self.T):
            raise ConfigInvalid("latent rank exceeds min(N, T)")
        if min(self.factor_scale, self.noise_scale, self.heterogeneity,
               self.loading_noise, self.treated_spread) < 0:
            raise ConfigInvalid("scales must be nonnegative")
        if self.p < 1:
            raise ConfigInvalid("need p >= 1 covariates")


@dataclass(frozen=True)
class SimulatedExperiment:
    """Generator output: the bundle plus everything an oracle needs."""

    bundle: ExperimentBundle
    tau_true: float
    y0: np.ndarray  # untreated potential outcomes for every unit, (N, T)
    params: dict = field(default_factory=dict)

    def treated_y0_post(self) -> np.ndarray:
        panel = self.bundle.panel
        return self.y0[np.ix_(panel.treated, np.arange(panel.t0, panel.n_periods))]


# ---------------------------------------------------------------------------
# Verdict rules (pure functions of (tau, p) scalars)


def significance(p_value: float, level: float = SIGNIFICANCE_LEVEL) -> bool:
    return p_value < level


def ab_st_pass_rule(gt_tau: float, gt_p: float, est_tau: float, est_p: float,
                    level: float = SIGNIFICANCE_LEVEL) -> bool:
    """Estimate must match the ground truth's significance, and its sign
    whenever the ground truth is significant."""
    gt_sig = significance(gt_p, level)
    est_sig = significance(est_p, level)
    if gt_sig != est_sig:
        return False
    if gt_sig and np.sign(gt_tau) != np.sign(est_tau):
        return False
    return True


def aa_st_pass_rule(aa_tau: float, aa_p: float, level: float = SIGNIFICANCE_LEVEL) -> bool:
    """The A/A comparison's ground truth is zero: any significant effect fails."""
    del aa_tau  # magnitude is irrelevant; only a significant effect fails
    return not significance(aa_p, level)


# ---------------------------------------------------------------------------
# Protocol reports


def ab_ground_truth(bundle: ExperimentBundle) -> EffectReport:
    """Experimental ATE: treated minus control post-period means (Welch)."""
    if bundle.control.size == 0:
        raise EmptyControl("bundle has no control units")
    panel = bundle.panel
    post = np.arange(panel.t0, panel.n_periods)
    treated_post = panel.outcomes[np.ix_(panel.treated, post)]
    control_post = panel.outcomes[np.ix_(bundle.control, post)]
    diff, se, p = welch_two_sample(treated_post.mean(axis=1), control_post.mean(axis=1))
    hte = treated_post - control_post.mean(axis=0)[None, :]
    return report_from_hte(hte, se=se, p_value=p, inference="welch")


def ab_st_validate(bundle: ExperimentBundle, pred: CounterfactualPrediction) -> tuple[EffectReport, bool]:
    """Score the counterfactual estimate against the experimental truth."""
    gt = ab_ground_truth(bundle)
    est = estimate_effects(bundle.panel, pred)
    return est, ab_st_pass_rule(gt.tau_hat, gt.p_value, est.tau_hat, est.p_value)


def aa_st_validate(bundle: ExperimentBundle, pred: CounterfactualPrediction) -> tuple[EffectReport, bool]:
    """Observed control outcomes vs the treated units' counterfactuals.

    Both sides estimate the same untreated mean, so a significant
    difference exposes prediction bias. Group means are compared with
    units as the sampling level (Welch across unit post-means).
    """
    if bundle.control.size == 0:
        raise EmptyControl("bundle has no control units")
    panel = bundle.panel
    post = np.arange(panel.t0, panel.n_periods)
    control_post = panel.outcomes[np.ix_(bundle.control, post)]
    diff, se, p = welch_two_sample(control_post.mean(axis=1), pred.yhat_post.mean(axis=1))
    hte = control_post - pred.yhat_post.mean(axis=0)[None, :]
    report = report_from_hte(hte, se=se, p_value=p, inference="welch")
    return report, aa_st_pass_rule(report.tau_hat, report.p_value)


def validate_bundle(bundle: ExperimentBundle, pred: CounterfactualPrediction,
                    model_label: str = "") -> ValidationVerdict:
    gt = ab_ground_truth(bundle)
    ab_est, ab_pass = ab_st_validate(bundle, pred)
    aa_est, aa_pass = aa_st_validate(bundle, pred)
    return ValidationVerdict(gt, ab_est, aa_est, ab_pass, aa_pass, model_label)


# ---------------------------------------------------------------------------
# Synthetic-panel generator (the desk-scale oracle)


def simulate_panel(cfg: SimConfig) -> SimulatedExperiment:
    """Low-rank factor panel with covariate-tied loadings.

    Mechanics, in order: unit covariates x_i (treated and control share
    a subregion centered heterogeneity units from the donor cloud's
    origin, along a direction the loading map does not see, so the
    subregion is level-typical); loadings u_i = M x_i + idiosyncratic
    noise; smooth global factor paths (level + sinusoid + trend); a
    local factor whose loading decays with covariate distance from the
    subregion center, giving treated units structure that distant
    donors cannot express; linear drift, tilted toward locally loaded
    units; Student-t(4) noise. Treated post-period observations get
    tau_true added on top of Y(0).

    Unit order: treated rows [0, n), control [n, n+n_control), donors
    after that — and bit-reproducible for a fixed seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    N, n, nc, T, p, r = cfg.N, cfg.n, cfg.n_control, cfg.T, cfg.p, cfg.r

    mix = rng.normal(size=(r, p)) / np.sqrt(p)
    # put the subregion center in the null space of the loading map: the
    # experiment population then has donor-typical outcome *levels* and is
    # distinguished only by covariate position (and whatever loads on it)
    null = scipy.linalg.null_space(mix)
    direction = null[:, 0] if null.shape[1] else np.ones(p) / np.sqrt(p)
    center = cfg.heterogeneity * direction
    level = rng.normal(size=r)
    amp = rng.uniform(0.5, 1.5, size=r)
    freq = rng.uniform(1.0, 3.0, size=r)
    phase = rng.uniform(0.0, 2 * np.pi, size=r)
    slope = rng.normal(scale=0.5, size=r)
    # slow local cycle: at the low end the pre window sees less than half
    # a period, so units without the local loading cannot infer the
    # post-period excursion from anything observable pre-launch
    freq_q = rng.uniform(0.5, 1.5)
    phase_q = rng.uniform(0.0, 2 * np.pi)

    x_exp = center[None, :] + cfg.treated_spread * rng.normal(size=(n + nc, p))
    x_donor = rng.normal(size=(N - n - nc, p))
    X = np.vstack([x_exp[:n], x_exp[n:], x_donor])

    tau_grid = np.linspace(0.0, 1.0, T)
    V = (
        level[:, None]
        + amp[:, None] * np.sin(2 * np.pi * freq[:, None] * tau_grid[None, :] + phase[:, None])
        + slope[:, None] * tau_grid[None, :]
    )
    # loadings follow covariates (so covariate matching is informative)
    # plus an idiosyncratic part no donor can predict: unit-level error
    # that keeps cross-unit inference honest
    U = X @ mix.T + cfg.loading_noise * rng.normal(size=(N, r))
    y0 = cfg.factor_scale * (U @ V)

    # local factor: expressed strongly inside the treated subregion,
    # weakly outside — the interpolation-bias driver
    sq_dist = ((X - center[None, :]) ** 2).sum(axis=1)
    w_local = np.exp(-sq_dist / (2.0 * LOCAL_KERNEL_SCALE * p))
    q_path = np.sin(2 * np.pi * freq_q * tau_grid + phase_q)
    local_amp = LOCAL_AMP * cfg.heterogeneity * cfg.factor_scale
    y0 = y0 + local_amp * w_local[:, None] * q_path[None, :]

    if cfg.drift:
        # every unit trends, but the trend is steepest where the local
        # loading is high: donor-based corrections anchored outside the
        # subregion recover the shared part and under-state the rest
        tilt = 1.0 + cfg.drift_tilt * w_local
        y0 = y0 + cfg.drift * tilt[:, None] * tau_grid[None, :]

    noise = rng.standard_t(4, size=(N, T)) * (cfg.noise_scale / np.sqrt(2.0))
    y = y0 + noise
    y = np.ascontiguousarray(y)
    y[:n, cfg.t0 :] += cfg.tau_true

    width = len(str(N))
    ids = tuple(f"u{i:0{width}d}" for i in range(N))
    panel = PanelMatrix(ids, y, cfg.t0, np.arange(n))
    cov = CovariateTable(ids, X)
    bundle = ExperimentBundle(panel, cov, np.arange(n, n + nc))
    params = {
        "r": r,
        "factor_scale": cfg.factor_scale,
        "noise_scale": cfg.noise_scale,
        "heterogeneity": cfg.heterogeneity,
        "drift": cfg.drift,
        "local_amp": local_amp,
    }
    return SimulatedExperiment(bundle, cfg.tau_true, y0, params)


# ---------------------------------------------------------------------------
# Study harnesses


@dataclass(frozen=True)
class ValidatedRun:
    """One pipeline run scored against the bundle and the oracle."""

    result: PipelineResult
    verdict: ValidationVerdict
    bias_true: float  # mean(Y(0) − prediction) over treated post, vs the oracle


def run_and_validate(sim: SimulatedExperiment, config: PipelineConfig) -> ValidatedRun:
    result = run_pipeline(
        sim.bundle.panel,
        sim.bundle.covariates,
        config,
        eligible_donors=sim.bundle.donor_pool,
    )
    verdict = validate_bundle(sim.bundle, result.pred, result.spec_used.label)
    bias_true = tuning.bias(result.pred.yhat_post, sim.treated_y0_post())
    return ValidatedRun(result, verdict, bias_true)


@dataclass(frozen=True)
class StalenessStudy:
    fresh: ValidatedRun
    stale: ValidatedRun
    stale_gap: int


def staleness_study(cfg: SimConfig, stale_gap: int, config: PipelineConfig) -> StalenessStudy:
    """Fresh vs stale training windows on the same simulated panel.

    The stale run trains (and cross-validates) on columns ending
    stale_gap periods before t0, mimicking a model fit on an old
    snapshot; under drift its bias grows with the gap.
    """
    if stale_gap < 1:
        raise ConfigInvalid("stale_gap must be >= 1")
    if cfg.t0 - stale_gap < 2:
        raise InsufficientColumns(f"stale_gap={stale_gap} leaves too few training columns")
    sim = simulate_panel(cfg)
    fresh = run_and_validate(sim, replace(config, train_end=None))
    stale = run_and_validate(sim, replace(config, train_end=cfg.t0 - stale_gap))
    return StalenessStudy(fresh, stale, stale_gap)
