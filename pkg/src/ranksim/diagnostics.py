"""Rank-similarity diagnostic: chi-squared means test on latent ranks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import chi2

from .bootstrap import BootstrapPlan, draw_weights, _replicate_rng
from .dataset import DataError, T0, TrialDataset, select

__all__ = ["latent_ranks", "CellScheme", "MeansTestResult", "means_test"]


def latent_ranks(values, weights=None) -> np.ndarray:
    """Mid-distribution ranks in (0,1): F(v-) + p(v)/2 under the (weighted)
    empirical law; equals (midrank - 0.5)/n at unit weights, ties averaged."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 0:
        raise ValueError("empty input")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    v = values[order]
    wo = w[order]
    total = wo.sum()
    new = np.r_[True, v[1:] != v[:-1]]
    group = np.cumsum(new) - 1
    w_group = np.bincount(group, weights=wo)
    cum_below = np.r_[0.0, np.cumsum(w_group)[:-1]]
    mid = (cum_below + 0.5 * w_group) / total
    out = np.empty(n)
    out[order] = mid[group]
    return out


@dataclass(frozen=True)
class CellScheme:
    """Covariate cells: cross-classification of columns, cut where continuous.

    ``columns`` maps a covariate name (from the dataset's covariate_names) to
    either None (use the values as discrete codes) or a sorted list of cut
    points splitting the real line into len(cuts)+1 bins.
    """

    columns: dict

    @classmethod
    def from_config(cls, cfg: dict) -> "CellScheme":
        cols = {}
        for item in cfg["columns"]:
            cols[item["name"]] = item.get("cuts")
        return cls(cols)

    def assign(self, ds: TrialDataset) -> np.ndarray:
        codes = []
        for name, cuts in self.columns.items():
            try:
                j = ds.covariate_names.index(name) + 1
            except ValueError:
                raise DataError(f"cell column {name!r} not among covariates") from None
            col = ds.w[:, j]
            if cuts is None:
                _, code = np.unique(col, return_inverse=True)
            else:
                code = np.digitize(col, np.asarray(cuts, dtype=float))
            codes.append(code)
        combined = np.zeros(ds.n, dtype=np.int64)
        for code in codes:
            combined = combined * (code.max() + 1) + code
        _, cells = np.unique(combined, return_inverse=True)
        return cells


@dataclass(frozen=True)
class MeansTestResult:
    n_cells: int
    cell_sizes: np.ndarray
    m0: np.ndarray
    mb: np.ndarray
    statistic: float
    dof: int
    p_value: float
    vcov: np.ndarray
    n: int
    n_replicates: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "cell": np.arange(self.n_cells),
            "n": self.cell_sizes,
            "mean_rank_outcome": self.m0,
            "mean_rank_proxy": self.mb,
            "difference": self.m0 - self.mb,
        })


def _cell_means(ranks: np.ndarray, cells: np.ndarray, w: np.ndarray, J: int):
    totals = np.bincount(cells, weights=w, minlength=J)
    if np.any(totals <= 0):
        return None
    return np.bincount(cells, weights=w * ranks, minlength=J) / totals


def means_test(ds: TrialDataset, cells, plan: BootstrapPlan,
               positive_only: bool = True) -> MeansTestResult:
    """Chi-squared test that latent ranks of outcome and proxy share cell means.

    The test sample is the control arm (both variables positive when
    ``positive_only``); ranks are computed within that sample, separately for
    the outcome and the proxy. The covariance of the cell-mean differences
    comes from the exchangeable bootstrap under ``plan``, recomputing the
    weighted ranks per replicate.
    """
    if isinstance(cells, CellScheme):
        cell_all = cells.assign(ds)
    elif callable(cells):
        cell_all = np.asarray(cells(ds))
    else:
        cell_all = np.asarray(cells)
        if cell_all.shape != (ds.n,):
            raise ValueError("cell array must assign one cell per dataset row")

    rows = select(ds, T0)
    if positive_only:
        rows = rows[(ds.y[rows] > 0) & (ds.y_b[rows] > 0)]
        if rows.size == 0:
            raise DataError("means-test sample is empty after positivity selection")
    y, yb = ds.y[rows], ds.y_b[rows]
    _, cell = np.unique(cell_all[rows], return_inverse=True)
    J = int(cell.max()) + 1
    sizes = np.bincount(cell, minlength=J)
    if np.any(sizes == 0):
        raise DataError("empty covariate cell in the means-test sample")

    m0 = _cell_means(latent_ranks(y), cell, np.ones(rows.size), J)
    mb = _cell_means(latent_ranks(yb), cell, np.ones(rows.size), J)
    delta = m0 - mb
    dof = J - 1

    if np.allclose(delta, 0.0, atol=1e-14):
        return MeansTestResult(J, sizes, m0, mb, 0.0, dof, 1.0,
                               np.zeros((J, J)), rows.size, plan.n_replicates)

    clusters = ds.cluster[rows]
    uniq_cl, cl_code = np.unique(clusters, return_inverse=True)
    level = plan.resolve_level(ds)
    draws = np.empty((plan.n_replicates, J))
    kept = 0
    for b in range(plan.n_replicates):
        rng = _replicate_rng(plan.seed, b)
        if level == "cluster":
            w = draw_weights(plan, uniq_cl.size, rng)[cl_code]
        else:
            w = draw_weights(plan, rows.size, rng)
        if w.sum() <= 0:
            continue
        m0b = _cell_means(latent_ranks(y, w), cell, w, J)
        mbb = _cell_means(latent_ranks(yb, w), cell, w, J)
        if m0b is None or mbb is None:
            continue
        draws[kept] = m0b - mbb
        kept += 1
    if kept < max(2, J + 1):
        raise RuntimeError("too few usable bootstrap replicates for the covariance")
    V = np.cov(draws[:kept].T, ddof=1)
    V = np.atleast_2d(V)
    try:
        stat = float(delta @ np.linalg.solve(V, delta))
    except np.linalg.LinAlgError:
        ridge = 1e-10 * np.trace(V) / J
        stat = float(delta @ np.linalg.solve(V + ridge * np.eye(J), delta))
    p_value = float(chi2.sf(stat, dof))
    return MeansTestResult(J, sizes, m0, mb, stat, dof, p_value, V,
                           rows.size, plan.n_replicates)
