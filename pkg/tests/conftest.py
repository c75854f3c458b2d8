import numpy as np
import pytest

from postlaunch import CovariateTable, PanelMatrix


def make_factor_panel(n_units=40, T=24, t0=16, r=3, noise=0.05, seed=0, n_treated=4):
    """Low-rank panel with a known factor structure.

    Donors span the factor space by construction, so regression oracles
    have an exact target when noise=0.
    """
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n_units, r))
    V = rng.normal(size=(r, T))
    y = U @ V + noise * rng.normal(size=(n_units, T))
    ids = tuple(f"u{i:03d}" for i in range(n_units))
    return PanelMatrix(ids, y, t0, np.arange(n_treated))


@pytest.fixture
def factor_panel():
    return make_factor_panel()


@pytest.fixture
def tiny_panel():
    rng = np.random.default_rng(42)
    y = rng.normal(size=(10, 8))
    return PanelMatrix(tuple(f"u{i}" for i in range(10)), y, 5, np.array([0, 1]))


@pytest.fixture
def tiny_cov(tiny_panel):
    rng = np.random.default_rng(7)
    return CovariateTable(tiny_panel.unit_ids, rng.normal(size=(10, 3)))
