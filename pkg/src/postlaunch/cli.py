"""Batch command-line interface.

Subcommands:
  match      phase-1 diagnostics: neighbor lists and quantile alignment
  estimate   end-to-end effect estimation on panel files
  validate   A/B-ST / A/A-ST scoring against a held-out control group
  simulate   materialize a synthetic experiment to the panel file formats
  diagnose   plot-ready CSVs: per-model error/bias distributions, unit series

Configuration resolves as flags > config file > built-in defaults; the
config file is plain ``key = value`` lines keyed by flag name. Every
run writes its outputs plus a ``manifest.json`` into --out and draws
all randomness from --seed, so equal manifests give byte-identical
outputs (stage timings, recorded in the manifest and printed on
stdout, are the one field excluded from that guarantee).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from .errors import ConfigInvalid, EmptyControl, PostLaunchError, UnknownUnitId
from .matching import (
    AnnParams,
    DEFAULT_QUANTILES,
    build_index,
    exclude_spillover,
    match_donors,
    quantile_alignment,
    subsample_donors,
)
from .panel import load_covariates, load_panel, write_covariates, write_id_list, write_panel
from .pipeline import PipelineConfig, _child_seed, run_pipeline
from .regress import _HYPER_KEYS, ModelSpec, fit_predict
from .tuning import DEFAULT_ALPHA, bias, default_candidates, relative_error
from .validation import (
    ExperimentBundle,
    SimConfig,
    run_and_validate,
    simulate_panel,
    validate_bundle,
)

# ---------------------------------------------------------------------------
# Option tables. One row per flag: (flag strings, argparse kwargs). The
# tables drive parser construction AND the flag/config/default resolution
# recorded in every manifest, so a flag exists exactly once, here.

_GLOBAL = [
    (["--config"], dict(metavar="PATH", default=None, help="key = value file supplying defaults for any flag")),
    (["--seed"], dict(type=int, default=0, help="root seed for every random component")),
    (["--threads"], dict(type=int, default=1, help="worker-thread cap")),
    (["--out"], dict(metavar="DIR", default="out", help="output directory")),
]

_INPUTS = [
    (["--outcomes"], dict(metavar="CSV", default=None, help="wide outcome matrix (unit_id,t1..tT)")),
    (["--treated"], dict(metavar="FILE", default=None, help="treated unit ids, one per line")),
    (["--t0"], dict(type=int, default=None, help="number of pre-treatment periods")),
    (["--covariates"], dict(metavar="CSV", default=None, help="unit covariates (unit_id,x1..xp)")),
]

_PHASE1 = [
    (["--k"], dict(type=int, default=10, help="nearest donors per treated unit")),
    (["--trees"], dict(type=int, default=8, help="random-projection trees in the ANN index")),
    (["--leaf-size"], dict(type=int, default=32)),
    (["--metric"], dict(choices=["euclidean", "cosine"], default="euclidean")),
    (["--exact-ann"], dict(action="store_true", help="brute-force neighbor search")),
    (["--subsample"], dict(type=float, default=None, metavar="FRAC", help="uniform donor subsample before anything else")),
    (["--exclude-file"], dict(metavar="FILE", default=None, help="donor ids to drop (spillover policy)")),
]

_PHASE2 = [
    (["--single-phase"], dict(action="store_true", help="skip covariate matching; regress on the full pool")),
    (["--pool-mode"], dict(choices=["union", "per-unit"], default="union")),
    (["--alpha"], dict(type=float, default=DEFAULT_ALPHA, help="bias weight in the selection loss")),
    (["--norm"], dict(choices=["l1", "frobenius"], default="l1")),
    (["--cv"], dict(choices=["holdout", "rolling"], default="holdout")),
    (["--folds"], dict(type=int, default=3)),
    (["--val-width"], dict(type=int, default=8, help="validation-window width in periods")),
    (["--grid"], dict(metavar="FILE", default=None, help="candidate grid overrides, one 'method = v1,v2' line each")),
    (["--model"], dict(metavar="SPEC", default=None, help="pin the model, e.g. ridge=100 or knn=5 (skips tuning)")),
    (["--center"], dict(choices=["none", "column"], default="none", help="column-center before the PCR-family SVD")),
    (["--train-end"], dict(type=int, default=None, metavar="T", help="train on periods 1..T only (stale-window runs)")),
]

_EFFECTS = [
    (["--inference"], dict(choices=["ttest", "placebo"], default="ttest")),
    (["--placebo-draws"], dict(type=int, default=200)),
    (["--split-fraction"], dict(type=float, default=None, metavar="FRAC", help="hold-out-split bias correction")),
]

# SimConfig fields exposed as flags; dest names match the dataclass so a
# config file doubles as a SimConfig file. t0 is shared with _INPUTS.
_SIM = [
    (["--N"], dict(type=int, default=None, help="total simulated units")),
    (["--n"], dict(type=int, default=None, help="treated units")),
    (["--T"], dict(type=int, default=None, help="periods")),
    (["--p"], dict(type=int, default=None, help="covariate dimension")),
    (["--r"], dict(type=int, default=None, help="latent factor rank")),
    (["--factor-scale"], dict(type=float, default=None)),
    (["--noise-scale"], dict(type=float, default=None)),
    (["--tau-true"], dict(type=float, default=None)),
    (["--heterogeneity"], dict(type=float, default=None)),
    (["--treated-spread"], dict(type=float, default=None)),
    (["--drift"], dict(type=float, default=None)),
    (["--drift-tilt"], dict(type=float, default=None)),
    (["--loading-noise"], dict(type=float, default=None)),
    (["--n-control"], dict(type=int, default=None)),
]

_REPS = [
    (["--replications"], dict(type=int, default=1, help="simulated replications (seeds seed, seed+1, ...)")),
    (["--seeds"], dict(metavar="LIST", default=None, help="explicit comma-separated seed list (overrides --replications)")),
]

COMMAND_OPTS = {
    "match": _GLOBAL + _INPUTS + _PHASE1,
    "estimate": _GLOBAL + _INPUTS + _PHASE1 + _PHASE2 + _EFFECTS,
    "validate": _GLOBAL + _INPUTS
    + [(["--control"], dict(metavar="FILE", default=None, help="control unit ids, one per line"))]
    + _PHASE1 + _PHASE2 + _EFFECTS + _SIM + _REPS,
    "simulate": _GLOBAL + [(["--t0"], dict(type=int, default=None))] + _SIM + _REPS,
    "diagnose": _GLOBAL + _INPUTS + _PHASE1 + _PHASE2 + _EFFECTS
    + [(["--units"], dict(metavar="IDS", default=None, help="comma-separated treated ids to export as series CSVs"))],
}

_HELP = {
    "match": "run phase-1 donor filtering and write neighbor/alignment diagnostics",
    "estimate": "estimate the treatment effect end to end",
    "validate": "score a run against a held-out control group (or simulated replications)",
    "simulate": "write a synthetic experiment bundle with recorded ground truth",
    "diagnose": "export plot-ready error/bias distributions and unit series",
}


def _dest(flags: list) -> str:
    return flags[0].lstrip("-").replace("-", "_")


def build_parser(suppress_defaults: bool = False) -> argparse.ArgumentParser:
    """The CLI parser; with suppress_defaults only explicit flags survive."""
    parser = argparse.ArgumentParser(
        prog="postlaunch",
        description="post-launch treatment-effect estimation without a live control group",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command, opts in COMMAND_OPTS.items():
        sp = sub.add_parser(command, help=_HELP[command])
        for flag_names, kw in opts:
            kw = dict(kw)
            if suppress_defaults:
                kw["default"] = argparse.SUPPRESS
            sp.add_argument(*flag_names, **kw)
    return parser


# ---------------------------------------------------------------------------
# Config file + resolution


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment; keys match flags."""
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigInvalid(f"expected a boolean, got {raw!r}")


def _coerce(kw: dict, raw: str):
    if kw.get("action") == "store_true":
        return _to_bool(raw)
    if raw.strip().lower() in ("none", ""):
        return None
    value = kw.get("type", str)(raw.strip())
    choices = kw.get("choices")
    if choices and value not in choices:
        raise ConfigInvalid(f"value {value!r} not in {choices}")
    return value


def resolve_config(command: str, given: dict, file_values: dict) -> tuple[dict, dict]:
    """Merge explicit flags, config-file values, and declared defaults.

    Returns (resolved, sources) where sources tags every key with
    'flag', 'config', or 'default' for the manifest.
    """
    resolved: dict = {}
    sources: dict = {}
    known = set()
    for flag_names, kw in COMMAND_OPTS[command]:
        dest = _dest(flag_names)
        known.add(dest)
        if dest in given:
            resolved[dest] = given[dest]
            sources[dest] = "flag"
        elif dest in file_values:
            resolved[dest] = _coerce(kw, file_values[dest])
            sources[dest] = "config"
        else:
            resolved[dest] = False if kw.get("action") == "store_true" else kw.get("default")
            sources[dest] = "default"
    unused = sorted(set(file_values) - known)
    if unused:
        print(f"note: config keys not used by {command}: {', '.join(unused)}", file=sys.stderr)
    return resolved, sources


def _require(resolved: dict, *keys: str) -> None:
    missing = [k for k in keys if resolved.get(k) is None]
    if missing:
        raise ConfigInvalid("missing required options: " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ---------------------------------------------------------------------------
# Small shared helpers


def _fmt(x) -> str:
    # repr of a Python float round-trips exactly, keeping reruns byte-identical
    return repr(float(x))


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _read_ids(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_seed_list(text: str) -> list:
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigInvalid(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigInvalid("--seeds list is empty")
    return seeds


def parse_model_spec(text: str) -> ModelSpec:
    """'ridge=100', 'knn=5', 'pcr=3', or bare 'pcr' for auto rank."""
    method, _, raw = text.partition("=")
    method = method.strip()
    if method not in _HYPER_KEYS:
        raise ConfigInvalid(f"unknown method {method!r}; expected one of {sorted(_HYPER_KEYS)}")
    if not raw:
        return ModelSpec(method, {})
    key = next(iter(_HYPER_KEYS[method]))
    value = int(raw) if key in ("k", "rank") else float(raw)
    return ModelSpec(method, {key: value})


def load_grid_file(path) -> tuple:
    """Grid overrides: one ``method = v1,v2,...`` line per family."""
    candidates = []
    for method, raw in read_config_file(path).items():
        if method not in _HYPER_KEYS:
            raise ConfigInvalid(f"grid file names unknown method {method!r}")
        key = next(iter(_HYPER_KEYS[method]))
        for tok in raw.split(","):
            tok = tok.strip()
            if not tok:
                continue
            value = int(tok) if key in ("k", "rank") else float(tok)
            candidates.append(ModelSpec(method, {key: value}))
    if not candidates:
        raise ConfigInvalid(f"grid file {path} defines no candidates")
    return tuple(candidates)


def _pipeline_config(res: dict) -> PipelineConfig:
    if res.get("model") and res.get("grid"):
        raise ConfigInvalid("--model pins the model; it cannot be combined with --grid")
    exclude = tuple(_read_ids(res["exclude_file"])) if res.get("exclude_file") else ()
    return PipelineConfig(
        two_phase=not res.get("single_phase", False),
        k=res["k"],
        trees=res["trees"],
        leaf_size=res["leaf_size"],
        metric=res["metric"],
        exact_ann=res.get("exact_ann", False),
        pool_mode=res.get("pool_mode", "union"),
        subsample=res.get("subsample"),
        exclude_ids=exclude,
        model=parse_model_spec(res["model"]) if res.get("model") else None,
        candidates=load_grid_file(res["grid"]) if res.get("grid") else None,
        alpha=res["alpha"],
        norm=res["norm"],
        cv={"holdout": "holdout_tail", "rolling": "rolling"}[res["cv"]],
        folds=res["folds"],
        val_width=res["val_width"],
        center=res["center"],
        train_end=res.get("train_end"),
        inference=res.get("inference", "ttest"),
        placebo_draws=res.get("placebo_draws", 200),
        split_fraction=res.get("split_fraction"),
        seed=res["seed"],
        threads=res["threads"],
    )


_SIM_FIELDS = tuple(f.name for f in fields(SimConfig) if f.name != "seed")


def _sim_config(res: dict, seed: int) -> SimConfig:
    kwargs = {name: res[name] for name in _SIM_FIELDS if res.get(name) is not None}
    return SimConfig(seed=seed, **kwargs)


def _replication_seeds(res: dict) -> list:
    if res.get("seeds"):
        return _parse_seed_list(res["seeds"])
    reps = res.get("replications", 1)
    if reps < 1:
        raise ConfigInvalid("--replications must be >= 1")
    return [res["seed"] + i for i in range(reps)]


def _load_inputs(res: dict, need_covariates: bool):
    _require(res, "outcomes", "treated", "t0")
    panel = load_panel(res["outcomes"], res["treated"], res["t0"])
    covariates = None
    if res.get("covariates"):
        covariates = load_covariates(res["covariates"], panel)
    elif need_covariates:
        raise ConfigInvalid("--covariates is required unless --single-phase is set")
    inputs = {key: res[key] for key in ("outcomes", "treated", "covariates", "exclude_file", "control", "grid")
              if res.get(key)}
    return panel, covariates, inputs


def _write_manifest(out_dir, command, res, sources, inputs, seeds, selected, timings, output_files):
    manifest = {
        "command": command,
        "version": __version__,
        "config": {k: v for k, v in sorted(res.items())},
        "config_sources": {k: v for k, v in sorted(sources.items())},
        "seeds": list(seeds),
        "selected_model": selected,
        "input_digests": {name: {"path": str(path), "sha256": _sha256(path)} for name, path in sorted(inputs.items())},
        "timings_sec": {k: round(float(v), 6) for k, v in sorted(timings.items())},
        "outputs": sorted(output_files),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    line = " ".join(f"{k} {timings[k]:.2f}s" for k in sorted(timings))
    print(f"timings: {line}")


def _model_key(spec: ModelSpec) -> tuple:
    hyper = ",".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(spec.hyper.items()))
    return spec.method, hyper


# ---------------------------------------------------------------------------
# Subcommands


def cmd_match(res: dict, sources: dict) -> int:
    out_dir = res["out"]
    os.makedirs(out_dir, exist_ok=True)
    timings: dict = {}
    t_start = time.perf_counter()
    panel, covariates, inputs = _load_inputs(res, need_covariates=True)
    timings["load"] = time.perf_counter() - t_start

    t_match = time.perf_counter()
    pool = panel.donors
    if res.get("subsample") is not None:
        pool = subsample_donors(panel, res["subsample"], seed=_child_seed(res["seed"], 0))
    params = AnnParams(
        tree_count=res["trees"],
        leaf_size=res["leaf_size"],
        metric=res["metric"],
        seed=_child_seed(res["seed"], 1),
        exact=res.get("exact_ann", False),
    )
    index = build_index(covariates, pool, params)
    filt = match_donors(index, covariates, panel.treated, res["k"])
    if res.get("exclude_file"):
        filt = exclude_spillover(filt, _read_ids(res["exclude_file"]), panel)
        pool = np.setdiff1d(pool, np.array(sorted(filt.excluded), dtype=np.intp))
    timings["match"] = time.perf_counter() - t_match

    t_write = time.perf_counter()
    neighbor_rows = []
    for i in panel.treated:
        for rank, (donor, dist) in enumerate(filt.neighbors[int(i)], 1):
            neighbor_rows.append([panel.unit_ids[i], rank, panel.unit_ids[donor], _fmt(dist)])
    _write_csv(os.path.join(out_dir, "neighbors.csv"),
               ["treated_id", "rank", "donor_id", "distance"], neighbor_rows)

    quantile_header = [f"q{q * 100:g}" for q in DEFAULT_QUANTILES]
    alignment_rows = []
    for approach, donors in (("single-phase", pool), ("two-phase", filt.donor_union)):
        for group, values in quantile_alignment(panel, donors):
            alignment_rows.append([group] + [_fmt(v) for v in values] + [approach])
    _write_csv(os.path.join(out_dir, "alignment.csv"),
               ["group"] + quantile_header + ["approach"], alignment_rows)

    write_id_list([panel.unit_ids[i] for i in filt.donor_union], os.path.join(out_dir, "donor_pool.txt"))
    write_id_list([panel.unit_ids[i] for i in pool], os.path.join(out_dir, "single_phase_pool.txt"))
    timings["write"] = time.perf_counter() - t_write
    timings["total"] = time.perf_counter() - t_start

    print(f"matched {panel.n_treated} treated units -> {filt.donor_union.size}-donor union "
          f"(single-phase pool {pool.size})")
    _write_manifest(out_dir, "match", res, sources, inputs, [res["seed"]], None, timings,
                    ["neighbors.csv", "alignment.csv", "donor_pool.txt", "single_phase_pool.txt"])
    return 0


def _write_effects(out_dir, panel, result) -> list:
    """EffectReport JSON + HTE / per-unit / coefficient / leaderboard CSVs."""
    report = result.report
    spec = result.spec_used
    files = ["effect.json", "hte.csv", "per_unit_effects.csv"]
    payload = report.to_dict()
    payload.update({
        "model": spec.label,
        "model_config": spec.to_config(),
        "n_donors_used": int(result.donors_used.size),
    })
    if result.selection is not None:
        payload["cv_plan"] = result.selection.cv_plan.describe()
    _write_json(os.path.join(out_dir, "effect.json"), payload)

    treated_ids = [panel.unit_ids[i] for i in panel.treated]
    hte_rows = []
    for row, uid in enumerate(treated_ids):
        for j, col in enumerate(result.pred.pred_cols):
            hte_rows.append([uid, int(col) + 1, _fmt(report.hte[row, j])])
    _write_csv(os.path.join(out_dir, "hte.csv"), ["unit_id", "period", "effect"], hte_rows)
    _write_csv(os.path.join(out_dir, "per_unit_effects.csv"), ["unit_id", "effect"],
               [[uid, _fmt(report.per_unit_effects[row])] for row, uid in enumerate(treated_ids)])

    model = result.pred.model
    if model.feature_kind == "latent":
        feature_names = [f"pc{j + 1}" for j in range(model.n_features)]
    else:
        feature_names = [panel.unit_ids[i] for i in result.donors_used]
    coef_rows = []
    for col, uid in enumerate(treated_ids):
        for row_idx, name in enumerate(feature_names):
            coef_rows.append([uid, name, _fmt(model.coefficients[row_idx, col])])
        coef_rows.append([uid, "intercept", _fmt(model.intercepts[col])])
    _write_csv(os.path.join(out_dir, "coefficients.csv"),
               ["treated_id", "donor_id_or_pc", "coefficient"], coef_rows)
    files.append("coefficients.csv")

    if result.selection is not None:
        rows = []
        for cand, loss in result.selection.leaderboard:
            method, hyper = _model_key(cand)
            rows.append([method, hyper, _fmt(loss.relative_error), _fmt(loss.bias), _fmt(loss.combined)])
        _write_csv(os.path.join(out_dir, "leaderboard.csv"),
                   ["method", "hyper", "relative_error", "bias", "combined"], rows)
        files.append("leaderboard.csv")
    return files


def cmd_estimate(res: dict, sources: dict) -> int:
    out_dir = res["out"]
    os.makedirs(out_dir, exist_ok=True)
    timings: dict = {}
    t_start = time.perf_counter()
    config = _pipeline_config(res)
    panel, covariates, inputs = _load_inputs(res, need_covariates=config.two_phase)
    timings["load"] = time.perf_counter() - t_start

    result = run_pipeline(panel, covariates, config)
    timings.update({k: v for k, v in result.timings.items() if k != "total"})

    t_write = time.perf_counter()
    files = _write_effects(out_dir, panel, result)
    timings["write"] = time.perf_counter() - t_write
    timings["total"] = time.perf_counter() - t_start

    report = result.report
    star = "*" if report.significant else ""
    print(f"model {result.spec_used.label}  tau_hat {report.tau_hat:+.4f}{star}  "
          f"se {report.se:.4f}  p {report.p_value:.4f}  donors {result.donors_used.size}")
    _write_manifest(out_dir, "estimate", res, sources, inputs, [res["seed"]],
                    result.spec_used.to_config(), timings, files)
    return 0


def _verdict_row(experiment: str, verdict) -> list:
    gt, st, aa = verdict.ab_ground_truth, verdict.ab_st, verdict.aa_st
    return [
        experiment,
        _fmt(gt.tau_hat), _fmt(gt.p_value),
        _fmt(st.tau_hat), _fmt(st.p_value),
        _fmt(aa.tau_hat), _fmt(aa.p_value),
        verdict.model_label,
        int(verdict.ab_st_pass), int(verdict.aa_st_pass),
    ]


def _verdict_scalars(experiment: str, verdict) -> dict:
    out = {"experiment": experiment, "model": verdict.model_label,
           "ab_st_pass": bool(verdict.ab_st_pass), "aa_st_pass": bool(verdict.aa_st_pass)}
    for name, rep in (("ab", verdict.ab_ground_truth), ("ab_st", verdict.ab_st), ("aa_st", verdict.aa_st)):
        out[name] = {"tau_hat": float(rep.tau_hat), "se": float(rep.se),
                     "p_value": float(rep.p_value), "significant": bool(rep.significant)}
    return out


def cmd_validate(res: dict, sources: dict) -> int:
    out_dir = res["out"]
    os.makedirs(out_dir, exist_ok=True)
    timings: dict = {}
    t_start = time.perf_counter()
    config = _pipeline_config(res)
    verdicts = []
    selected = []
    seeds = [res["seed"]]

    if res.get("outcomes"):
        panel, covariates, inputs = _load_inputs(res, need_covariates=config.two_phase)
        _require(res, "control")
        control_ids = _read_ids(res["control"])
        if not control_ids:
            raise EmptyControl(f"control file {res['control']} lists no units")
        control = np.array(sorted({panel.index_of(uid) for uid in control_ids}), dtype=np.intp)
        bundle = ExperimentBundle(panel, covariates, control)
        timings["load"] = time.perf_counter() - t_start
        result = run_pipeline(panel, covariates, config, eligible_donors=bundle.donor_pool)
        timings.update({k: v for k, v in result.timings.items() if k != "total"})
        verdicts.append(("panel", validate_bundle(bundle, result.pred, result.spec_used.label)))
        selected.append(result.spec_used.to_config())
    else:
        inputs = {"grid": res["grid"]} if res.get("grid") else {}
        seeds = _replication_seeds(res)
        t_run = time.perf_counter()
        for seed in seeds:
            sim = simulate_panel(_sim_config(res, seed))
            run = run_and_validate(sim, config)
            verdicts.append((f"sim-{seed}", run.verdict))
            selected.append(run.result.spec_used.to_config())
        timings["runs"] = time.perf_counter() - t_run

    t_write = time.perf_counter()
    header = ["experiment", "ab_tau", "ab_p", "ab_st_tau", "ab_st_p", "aa_st_tau", "aa_st_p",
              "model", "ab_st_pass", "aa_st_pass"]
    _write_csv(os.path.join(out_dir, "verdicts.csv"), header,
               [_verdict_row(name, v) for name, v in verdicts])
    n = len(verdicts)
    summary = {
        "n_experiments": n,
        "ab_st_pass_rate": sum(v.ab_st_pass for _, v in verdicts) / n,
        "aa_st_pass_rate": sum(v.aa_st_pass for _, v in verdicts) / n,
        "all_pass": all(v.ab_st_pass and v.aa_st_pass for _, v in verdicts),
    }
    _write_json(os.path.join(out_dir, "verdicts.json"),
                {"summary": summary, "experiments": [_verdict_scalars(name, v) for name, v in verdicts]})
    timings["write"] = time.perf_counter() - t_write
    timings["total"] = time.perf_counter() - t_start

    for name, verdict in verdicts:
        print(f"{name}: A/B-ST {'pass' if verdict.ab_st_pass else 'FAIL'}, "
              f"A/A-ST {'pass' if verdict.aa_st_pass else 'FAIL'}  [{verdict.model_label}]")
    _write_manifest(out_dir, "validate", res, sources, inputs, seeds,
                    selected[0] if len(selected) == 1 else selected, timings,
                    ["verdicts.csv", "verdicts.json"])
    return 0 if summary["all_pass"] else 1


def cmd_simulate(res: dict, sources: dict) -> int:
    out_dir = res["out"]
    os.makedirs(out_dir, exist_ok=True)
    timings: dict = {}
    t_start = time.perf_counter()
    seeds = _replication_seeds(res)
    files = []
    for seed in seeds:
        cfg = _sim_config(res, seed)
        sim = simulate_panel(cfg)
        rep_dir = out_dir if len(seeds) == 1 else os.path.join(out_dir, f"seed-{seed}")
        os.makedirs(rep_dir, exist_ok=True)
        panel = sim.bundle.panel
        write_panel(panel, os.path.join(rep_dir, "outcomes.csv"), os.path.join(rep_dir, "treated.txt"))
        write_covariates(sim.bundle.covariates, os.path.join(rep_dir, "covariates.csv"))
        write_id_list([panel.unit_ids[i] for i in sim.bundle.control], os.path.join(rep_dir, "control.txt"))
        truth = {
            "tau_true": float(sim.tau_true),
            "seed": seed,
            "config": asdict(cfg),
            "params": {k: (float(v) if np.isscalar(v) else np.asarray(v).tolist())
                       for k, v in sim.params.items()},
        }
        _write_json(os.path.join(rep_dir, "truth.json"), truth)
        prefix = "" if rep_dir == out_dir else f"seed-{seed}/"
        files += [prefix + name for name in
                  ("outcomes.csv", "treated.txt", "covariates.csv", "control.txt", "truth.json")]
        print(f"seed {seed}: N={panel.n_units} T={panel.n_periods} t0={panel.t0} "
              f"treated={panel.n_treated} control={sim.bundle.control.size} -> {rep_dir}")
    timings["total"] = time.perf_counter() - t_start
    _write_manifest(out_dir, "simulate", res, sources, {}, seeds, None, timings, files)
    return 0


def _candidate_predictions(panel, config, result):
    """Re-fit every candidate on the tail window used for diagnostics.

    Yields (spec, prediction matrix over the validation window); skips
    candidates that error on this panel, mirroring model selection.
    """
    width = config.val_width
    t0 = panel.t0
    if t0 - width < 2:
        raise ConfigInvalid(f"val_width {width} leaves fewer than 2 training columns")
    train_cols = np.arange(t0 - width)
    val_cols = np.arange(t0 - width, t0)
    if config.model is not None:
        specs = [config.model]
    elif config.candidates is not None:
        specs = list(config.candidates)
    else:
        specs = default_candidates(result.donors_used.size)

    per_unit = None
    if config.two_phase and config.pool_mode == "per-unit":
        per_unit = {int(i): np.array([d for d, _ in result.donor_filter.neighbors[int(i)]], dtype=np.intp)
                    for i in panel.treated}

    for spec in specs:
        try:
            if per_unit is None:
                pred = fit_predict(panel, result.donors_used, spec,
                                   train_cols=train_cols, pred_cols=val_cols, center=config.center)
                yhat = pred.yhat_post
            else:
                yhat = np.empty((panel.n_treated, width))
                for row, i in enumerate(panel.treated):
                    one = fit_predict(panel, per_unit[int(i)], spec, train_cols=train_cols,
                                      pred_cols=val_cols, center=config.center, treated_rows=[int(i)])
                    yhat[row] = one.yhat_post[0]
        except PostLaunchError:
            continue
        yield spec, yhat, val_cols


def cmd_diagnose(res: dict, sources: dict) -> int:
    out_dir = res["out"]
    os.makedirs(out_dir, exist_ok=True)
    timings: dict = {}
    t_start = time.perf_counter()
    config = _pipeline_config(res)
    panel, covariates, inputs = _load_inputs(res, need_covariates=config.two_phase)
    position = {int(i): row for row, i in enumerate(panel.treated)}
    requested = [tok.strip() for tok in (res.get("units") or "").split(",") if tok.strip()]
    for uid in requested:  # series exist only for treated units; fail before the run
        if int(panel.index_of(uid)) not in position:
            raise UnknownUnitId(uid)
    timings["load"] = time.perf_counter() - t_start

    result = run_pipeline(panel, covariates, config)
    timings.update({k: v for k, v in result.timings.items() if k != "total"})

    t_diag = time.perf_counter()
    treated_ids = [panel.unit_ids[i] for i in panel.treated]
    rel_rows, bias_rows = [], []
    selected_key = _model_key(result.spec_used)
    for spec, yhat, val_cols in _candidate_predictions(panel, config, result):
        actual = panel.outcomes[np.ix_(panel.treated, val_cols)]
        method, hyper = _model_key(spec)
        flag = int((method, hyper) == selected_key)
        for row, uid in enumerate(treated_ids):
            denom = np.abs(actual[row]).sum()
            rel = np.abs(yhat[row] - actual[row]).sum() / denom if denom else float("nan")
            rel_rows.append([method, hyper, uid, _fmt(rel), flag])
            bias_rows.append([method, hyper, uid, _fmt(bias(yhat[row], actual[row])), flag])
        # the mean rows use the module-level aggregates so they agree with
        # tuning exactly rather than re-averaging the per-unit column
        rel_rows.append([method, hyper, "mean", _fmt(relative_error(yhat, actual, "l1")), flag])
        bias_rows.append([method, hyper, "mean", _fmt(bias(yhat, actual)), flag])
    header = ["method", "hyper", "unit_id", "value", "selected"]
    _write_csv(os.path.join(out_dir, "model_rel_errors.csv"), header, rel_rows)
    _write_csv(os.path.join(out_dir, "model_biases.csv"), header, bias_rows)
    files = ["model_rel_errors.csv", "model_biases.csv"]

    if requested:
        pred = result.pred
        for uid in requested:
            i = panel.index_of(uid)
            row = position[int(i)]
            fitted = {int(c): pred.yhat_pre[row, j] for j, c in enumerate(pred.train_cols)}
            fitted.update({int(c): pred.yhat_post[row, j] for j, c in enumerate(pred.pred_cols)})
            series = []
            for t in range(panel.n_periods):
                counterfactual = _fmt(fitted[t]) if t in fitted else ""
                series.append([t + 1, _fmt(panel.outcomes[i, t]), counterfactual, int(t >= panel.t0)])
            name = f"series_{uid}.csv"
            _write_csv(os.path.join(out_dir, name),
                       ["period", "observed", "counterfactual", "is_post"], series)
            files.append(name)
    timings["diagnose"] = time.perf_counter() - t_diag
    timings["total"] = time.perf_counter() - t_start

    print(f"diagnostics for {len({tuple(r[:2]) for r in bias_rows})} candidates "
          f"(selected {result.spec_used.label}) -> {out_dir}")
    _write_manifest(out_dir, "diagnose", res, sources, inputs, [res["seed"]],
                    result.spec_used.to_config(), timings, files)
    return 0


_COMMANDS = {
    "match": cmd_match,
    "estimate": cmd_estimate,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
}


# ---------------------------------------------------------------------------
# Entry points


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    given = vars(build_parser(suppress_defaults=True).parse_args(argv))
    command = given.pop("command")
    try:
        file_values = read_config_file(given["config"]) if given.get("config") else {}
        resolved, sources = resolve_config(command, given, file_values)
        return _COMMANDS[command](resolved, sources)
    except PostLaunchError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return PostLaunchError.exit_code


def replay_manifest(manifest_path, out_dir=None) -> int:
    """Re-run a recorded manifest; outputs are byte-identical to the original.

    The manifest's resolved config snapshot fully determines the run, so
    no flags or config file are consulted. ``out_dir`` redirects outputs
    (e.g. to compare against the original run).
    """
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    resolved = dict(manifest["config"])
    if out_dir is not None:
        resolved["out"] = str(out_dir)
    sources = {key: "manifest" for key in resolved}
    return _COMMANDS[manifest["command"]](resolved, sources)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
