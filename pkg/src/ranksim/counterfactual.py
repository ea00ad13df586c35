"""Counterfactual control-outcome distributions for take-up subgroups.

Composes three fitted conditional CDFs — control outcome, proxy in the full
assigned arm, proxy in the take-up subgroup — into the counterfactual CDF of
the control outcome within that subgroup, then aggregates over the subgroup's
covariate rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dataset import SubgroupKey, T0D0, T1D0, TrialDataset, select
from .distreg import (
    ThresholdCdfModel,
    WeightVector,
    _weight_values,
    invert_quantile,
    monotone_rearrange,
    predict_cdf_matrix,
)

__all__ = [
    "CounterfactualCdf",
    "conditional_cf_cdf",
    "conditional_cf_matrix",
    "unconditional_cf_cdf",
    "two_sided_cf_cdf",
    "cf_mean",
    "cf_quantile",
]


@dataclass(frozen=True)
class CounterfactualCdf:
    """Estimated counterfactual CDF on the control-outcome grid."""

    d: int | None
    y_grid: np.ndarray
    values: np.ndarray
    control: ThresholdCdfModel | None = None
    proxy_all: ThresholdCdfModel | None = None
    proxy_d: ThresholdCdfModel | None = None
    conditional_cache: np.ndarray | None = field(default=None, repr=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"y": self.y_grid, "cdf": self.values})


def _step_index_map(from_grid: np.ndarray, to_grid: np.ndarray) -> np.ndarray:
    """Index of the largest ``to_grid`` point <= each ``from_grid`` value (-1: none)."""
    return np.searchsorted(to_grid, from_grid, side="right") - 1


def _rowwise_searchsorted(A: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Per-row left insertion points of V into sorted rows of A."""
    K = A.shape[1]
    lo = np.zeros(V.shape, dtype=np.int64)
    hi = np.full(V.shape, K, dtype=np.int64)
    for _ in range(int(np.ceil(np.log2(K + 1))) + 1):
        mid = (lo + hi) >> 1
        a_mid = np.take_along_axis(A, np.minimum(mid, K - 1), axis=1)
        less = a_mid < V
        lo = np.where(less, mid + 1, lo)
        hi = np.where(less, hi, mid)
    return lo


def conditional_cf_matrix(control, proxy_all, proxy_d, W_eval) -> np.ndarray:
    """Conditional counterfactual CDFs for each covariate row.

    Returns an (m, G0) matrix over the control grid: row i holds
    F_d(Q_all(F_control(y_j | w_i) | w_i) | w_i) for all grid points y_j.
    """
    Fc = predict_cdf_matrix(control, W_eval)
    Fp = predict_cdf_matrix(proxy_all, W_eval)
    Fd = predict_cdf_matrix(proxy_d, W_eval)
    g1 = proxy_all.grid.size
    step = _step_index_map(proxy_all.grid, proxy_d.grid)
    k = _rowwise_searchsorted(Fp, Fc)
    np.minimum(k, g1 - 1, out=k)  # taus above range clamp to the top quantile
    l = step[k]
    out = np.take_along_axis(Fd, np.maximum(l, 0), axis=1)
    out[l < 0] = 0.0  # proxy quantile below the subgroup's support
    return out


def conditional_cf_cdf(control, proxy_all, proxy_d, y: float, w) -> float:
    """Single-point conditional counterfactual CDF at a control-grid value."""
    j = int(np.argmin(np.abs(control.grid - y)))
    if not np.isclose(control.grid[j], y):
        raise ValueError(f"y={y} is not on the control grid")
    row = conditional_cf_matrix(control, proxy_all, proxy_d,
                                np.asarray(w, dtype=float)[None, :])
    return float(row[0, j])


def _aggregate(ds, control, proxy_all, proxy_d, key_eval, weights,
               d_label, keep_conditionals=False) -> CounterfactualCdf:
    rows = select(ds, key_eval)
    w = _weight_values(weights, ds.n)[rows]
    total = w.sum()
    if total <= 0:
        raise ValueError(f"subgroup {key_eval} has zero total weight")
    keep = w > 0
    cond = conditional_cf_matrix(control, proxy_all, proxy_d, ds.w[rows[keep]])
    values = monotone_rearrange((w[keep] / total) @ cond)
    return CounterfactualCdf(
        d=d_label,
        y_grid=control.grid,
        values=values,
        control=control,
        proxy_all=proxy_all,
        proxy_d=proxy_d,
        conditional_cache=cond if keep_conditionals else None,
    )


def unconditional_cf_cdf(ds: TrialDataset, models: dict, key_eval: SubgroupKey,
                         weights=None, keep_conditionals=False) -> CounterfactualCdf:
    """Weighted average of conditional counterfactual CDFs over a subgroup.

    ``models`` holds the three fits under keys ``control`` (outcome, {T=0}),
    ``proxy_all`` (proxy, {T=1}) and ``proxy_d`` (proxy, {T=1,D=d});
    ``key_eval`` is normally the same {T=1,D=d} subgroup.
    """
    return _aggregate(ds, models["control"], models["proxy_all"],
                      models["proxy_d"], key_eval, weights, key_eval.d,
                      keep_conditionals)


def two_sided_cf_cdf(ds: TrialDataset, models: dict, weights=None,
                     keep_conditionals=False) -> CounterfactualCdf:
    """Counterfactual CDF for the two-sided design's non-taker subgroup.

    Same composition with subgroups remapped: inner CDF and quantile come
    from {T=0,D=0} (keys ``control00``, ``proxy00``), the outer CDF from
    {T=1,D=0} (key ``proxy10``); covariates are averaged over {T=1,D=0}.
    """
    if ds.mode != "two-sided":
        select(ds, T0D0)  # one-sided data: {T=0,D=0} == {T=0}, still valid
    return _aggregate(ds, models["control00"], models["proxy00"],
                      models["proxy10"], T1D0, weights, 0, keep_conditionals)


def cf_mean(cf: CounterfactualCdf) -> float:
    """Riemann-Stieltjes mean with residual top mass at the last grid point."""
    masses = np.diff(cf.values, prepend=0.0)
    return float(cf.y_grid @ masses + cf.y_grid[-1] * (1.0 - cf.values[-1]))


def cf_quantile(cf: CounterfactualCdf, tau) -> float | np.ndarray:
    """Left-continuous inverse of the counterfactual CDF."""
    return invert_quantile(cf.values, cf.y_grid, tau)
