"""Panel data model: outcome matrix, treatment block, covariates, file I/O.

The outcome matrix is N units by T ordinal periods. Treatment is
block-simultaneous: a single cutoff ``t0`` splits columns into pre and
post, and a sorted index set marks the treated rows. Missing outcomes
are an ingestion error, never imputed.

File formats:
  * outcomes: wide CSV, header ``unit_id,t1,...,tT``
  * treated / control lists: plain text, one unit id per line
  * covariates: CSV, header ``unit_id,x1,...,xp``
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    BadT0,
    ConfigInvalid,
    DuplicateUnitId,
    MissingValue,
    RowMismatch,
    UnknownTreatedId,
    UnknownUnitId,
)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PanelMatrix:
    """N x T outcome matrix with a pre/post split and a treated row set.

    Immutable after construction; safe to share across workers.
    """

    unit_ids: tuple[str, ...]
    outcomes: np.ndarray  # (N, T) float64, read-only
    t0: int
    treated: np.ndarray  # sorted unique row indices, read-only

    def __post_init__(self):
        outcomes = np.asarray(self.outcomes, dtype=np.float64)
        if outcomes.ndim != 2:
            raise ConfigInvalid("outcomes must be a 2-D matrix")
        n_units, n_periods = outcomes.shape
        if len(self.unit_ids) != n_units:
            raise ConfigInvalid("unit_ids length does not match outcome rows")
        if len(set(self.unit_ids)) != n_units:
            seen = set()
            for uid in self.unit_ids:
                if uid in seen:
                    raise DuplicateUnitId(uid)
                seen.add(uid)
        if not 1 <= self.t0 < n_periods:
            raise BadT0(f"t0 must be in [1, {n_periods - 1}], got {self.t0}")
        treated = np.unique(np.asarray(self.treated, dtype=np.intp))
        if treated.size < 1 or treated.size >= n_units:
            raise ConfigInvalid("need 1 <= treated count < N")
        if treated[0] < 0 or treated[-1] >= n_units:
            raise ConfigInvalid("treated index out of range")
        if np.isnan(outcomes).any():
            i, t = np.argwhere(np.isnan(outcomes))[0]
            raise MissingValue(self.unit_ids[i], f"t{t + 1}")
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "outcomes", _frozen(outcomes))
        object.__setattr__(self, "treated", _frozen(treated))

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_treated(self) -> int:
        return self.treated.size

    @property
    def donors(self) -> np.ndarray:
        """All rows not in the treated set, sorted."""
        return np.setdiff1d(np.arange(self.n_units), self.treated)

    @property
    def pre_cols(self) -> range:
        return range(0, self.t0)

    @property
    def post_cols(self) -> range:
        return range(self.t0, self.n_periods)

    def index_of(self, unit_id: str) -> int:
        index = getattr(self, "_id_index", None)
        if index is None:
            index = {u: i for i, u in enumerate(self.unit_ids)}
            object.__setattr__(self, "_id_index", index)
        try:
            return index[unit_id]
        except KeyError:
            raise UnknownUnitId(unit_id) from None


@dataclass(frozen=True)
class CovariateTable:
    """N x p unit covariates, row-aligned with a PanelMatrix."""

    unit_ids: tuple[str, ...]
    covariates: np.ndarray  # (N, p) float64, read-only

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[1] < 1:
            raise ConfigInvalid("covariates must be N x p with p >= 1")
        if cov.shape[0] != len(self.unit_ids):
            raise ConfigInvalid("covariate rows do not match unit_ids")
        if np.isnan(cov).any():
            i, j = np.argwhere(np.isnan(cov))[0]
            raise MissingValue(self.unit_ids[i], f"x{j + 1}")
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "covariates", _frozen(cov))

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


@dataclass(frozen=True)
class OutcomeView:
    """Read-only rectangular slice of a PanelMatrix with provenance.

    ``rows`` and ``cols`` are strictly increasing indices into the parent
    matrix, so a view can always be traced back to (unit, period) pairs.
    """

    parent: PanelMatrix
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.intp)
        cols = np.asarray(self.cols, dtype=np.intp)
        if rows.size and (rows[0] < 0 or rows[-1] >= self.parent.n_units):
            raise ConfigInvalid("view rows out of bounds")
        if cols.size and (cols[0] < 0 or cols[-1] >= self.parent.n_periods):
            raise ConfigInvalid("view cols out of bounds")
        if rows.size > 1 and not (np.diff(rows) > 0).all():
            raise ConfigInvalid("view rows must be strictly increasing")
        if cols.size > 1 and not (np.diff(cols) > 0).all():
            raise ConfigInvalid("view cols must be strictly increasing")
        object.__setattr__(self, "rows", _frozen(rows))
        object.__setattr__(self, "cols", _frozen(cols))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows.size, self.cols.size)

    @property
    def values(self) -> np.ndarray:
        return _frozen(self.parent.outcomes[np.ix_(self.rows, self.cols)])


def split_views(panel: PanelMatrix) -> tuple[OutcomeView, OutcomeView, OutcomeView, OutcomeView]:
    """Partition the panel into (treated_pre, treated_post, donor_pre, donor_post)."""
    pre = np.arange(0, panel.t0)
    post = np.arange(panel.t0, panel.n_periods)
    donors = panel.donors
    return (
        OutcomeView(panel, panel.treated, pre),
        OutcomeView(panel, panel.treated, post),
        OutcomeView(panel, donors, pre),
        OutcomeView(panel, donors, post),
    )


def _read_id_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def _to_float_matrix(frame: pd.DataFrame, row_ids, col_names) -> np.ndarray:
    """Parse a string frame cell-by-cell via float(), which is correctly
    rounded (pandas' fast to_numeric path can be off by an ulp, breaking
    the write->load round trip)."""
    arr = frame.to_numpy(dtype=object)
    try:
        values = arr.astype(np.float64)
    except (ValueError, TypeError):
        for i in range(arr.shape[0]):
            for j in range(arr.shape[1]):
                try:
                    float(arr[i, j])
                except (ValueError, TypeError):
                    raise MissingValue(row_ids[i], col_names[j]) from None
        raise  # pragma: no cover - astype failed but every cell parses
    if np.isnan(values).any():
        i, j = np.argwhere(np.isnan(values))[0]
        raise MissingValue(row_ids[i], col_names[j])
    return values


def load_panel(outcome_path, treated_path, t0: int) -> PanelMatrix:
    """Load a wide outcome CSV and a treated-id list into a PanelMatrix."""
    raw = pd.read_csv(outcome_path, dtype=str, keep_default_na=False)
    if raw.columns[0] != "unit_id":
        raise ConfigInvalid(f"outcome CSV must start with a unit_id column, got {raw.columns[0]!r}")
    unit_ids = raw["unit_id"].tolist()
    seen = set()
    for uid in unit_ids:
        if uid in seen:
            raise DuplicateUnitId(uid)
        seen.add(uid)
    period_cols = list(raw.columns[1:])
    if not 1 <= t0 < len(period_cols):
        raise BadT0(f"t0 must be in [1, {len(period_cols) - 1}], got {t0}")
    values = _to_float_matrix(raw[period_cols], unit_ids, period_cols)

    index = {u: i for i, u in enumerate(unit_ids)}
    treated = []
    for uid in _read_id_list(treated_path):
        if uid not in index:
            raise UnknownTreatedId(uid)
        treated.append(index[uid])
    if not treated:
        raise ConfigInvalid("treated list is empty")
    return PanelMatrix(tuple(unit_ids), values, t0, np.array(sorted(set(treated))))


def load_covariates(path, panel: PanelMatrix) -> CovariateTable:
    """Load a covariate CSV and reorder its rows to match the panel."""
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if raw.columns[0] != "unit_id":
        raise ConfigInvalid(f"covariate CSV must start with a unit_id column, got {raw.columns[0]!r}")
    if raw.shape[1] < 2:
        raise ConfigInvalid("covariate CSV needs at least one covariate column")
    ids = raw["unit_id"].tolist()
    seen = set()
    for uid in ids:
        if uid in seen:
            raise DuplicateUnitId(uid)
        seen.add(uid)
    panel_index = {u: i for i, u in enumerate(panel.unit_ids)}
    for uid in ids:
        if uid not in panel_index:
            raise UnknownUnitId(uid)
    missing = [u for u in panel.unit_ids if u not in seen]
    if missing:
        raise RowMismatch(missing[0])
    cov_cols = list(raw.columns[1:])
    values = _to_float_matrix(raw[cov_cols], ids, cov_cols)
    order = np.array([panel_index[u] for u in ids])
    reordered = np.empty_like(values)
    reordered[order] = values
    return CovariateTable(panel.unit_ids, reordered)


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest round-trip decimal
    return repr(float(x))


def write_panel(panel: PanelMatrix, outcome_path, treated_path=None) -> None:
    """Write a panel back to the wide CSV format (values round-trip exactly)."""
    with open(outcome_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id"] + [f"t{t + 1}" for t in range(panel.n_periods)])
        for i, uid in enumerate(panel.unit_ids):
            writer.writerow([uid] + [_fmt(v) for v in panel.outcomes[i]])
    if treated_path is not None:
        write_id_list([panel.unit_ids[i] for i in panel.treated], treated_path)


def write_covariates(cov: CovariateTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id"] + [f"x{j + 1}" for j in range(cov.n_covariates)])
        for i, uid in enumerate(cov.unit_ids):
            writer.writerow([uid] + [_fmt(v) for v in cov.covariates[i]])


def write_id_list(ids, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid in ids:
            fh.write(f"{uid}\n")
