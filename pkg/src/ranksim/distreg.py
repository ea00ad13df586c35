"""Distribution regression over a threshold grid.

Fits one weighted binary regression per threshold y of a subgroup grid,
modelling F(y|w) = link(w'beta(y)). All thresholds of a model are independent
problems; `fit_model` solves them simultaneously with a vectorized
Fisher-scoring loop, `fit_threshold` is the single-threshold reference path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import SubgroupKey, TrialDataset, select, threshold_grid, _variable
from .links import CLAMP, LinkFunction, evaluate, get_link

__all__ = [
    "WeightVector",
    "ThresholdCdfModel",
    "fit_threshold",
    "fit_model",
    "predict_cdf",
    "predict_cdf_matrix",
    "monotone_rearrange",
    "invert_quantile",
]

MAX_ITER = 100
TOL_COEF = 1e-8
TOL_LOGLIK = 1e-12
MAX_HALVINGS = 20
RIDGE = 1e-8


@dataclass(frozen=True)
class WeightVector:
    """Nonnegative observation weights aligned with dataset rows."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or (v < 0).any():
            raise ValueError("weights must be a 1-D nonnegative array")
        if v.sum() <= 0:
            raise ValueError("weights must have positive total")
        object.__setattr__(self, "values", v)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @classmethod
    def unit(cls, n: int) -> "WeightVector":
        return cls(np.ones(n))


def _weight_values(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    if isinstance(weights, WeightVector):
        v = weights.values
    else:
        v = np.asarray(weights, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"weights have shape {v.shape}, expected ({n},)")
    return v


@dataclass(frozen=True)
class ThresholdCdfModel:
    """Per-subgroup distribution-regression fit.

    ``coef[j]`` is the coefficient vector at ``grid[j]``; ``fixed[j]`` is the
    clamp value for degenerate thresholds (nan where the threshold was
    actually fitted). Predicted CDFs are monotone-rearranged.
    """

    subgroup: SubgroupKey
    grid: np.ndarray
    coef: np.ndarray
    link_tag: str
    fixed: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray

    @property
    def link(self) -> LinkFunction:
        return get_link(self.link_tag)

    @property
    def n_thresholds(self) -> int:
        return int(self.grid.size)

    def diagnostics_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "threshold": self.grid,
            "iterations": self.iterations,
            "converged": self.converged,
            "degenerate": self.degenerate,
        })


def monotone_rearrange(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sort predicted CDF values so they are nondecreasing along the grid."""
    return np.sort(values, axis=axis)


def invert_quantile(cdf_values: np.ndarray, grid: np.ndarray, tau) -> np.ndarray | float:
    """Left-continuous generalized inverse on a finite grid.

    Returns the smallest grid value whose CDF is >= tau; taus above the top
    CDF value clamp to the last grid point (and below-range taus to the
    first), so the inverse is total.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    idx = np.searchsorted(cdf_values, tau, side="left")
    idx = np.minimum(idx, grid.size - 1)
    out = grid[idx]
    return float(out) if np.isscalar(tau) else out


def _loglik_cols(wZ, w, logit_p, log_1mp):
    # sum_i w_i [z log p + (1-z) log(1-p)], with logit_p = log p - log(1-p)
    return np.einsum("ij,ij->j", wZ, logit_p) + w @ log_1mp


_ETA_CLIP = 27.631021115928547  # logit(1 - 1e-12)


def _irls_batch(X, Z, w, link, B0):
    """Newton/Fisher scoring on all response columns of Z simultaneously.

    Columns deactivate as they converge (coefficient change < 1e-8 or
    relative log-likelihood change < 1e-12); step-halving guards the ascent,
    and a column that had to halve keeps its damping for the next iteration
    so separated-fit columns stop overshooting.
    """
    n, p = X.shape
    G = Z.shape[1]
    is_logit = link.tag == "logit"
    iu, ju = np.triu_indices(p)
    XO = X[:, iu] * X[:, ju]
    wZ = w[:, None] * Z
    XtwZ = X.T @ wZ  # constant gradient piece: grad_j = XtwZ_j - X'(w r P)_j

    B = B0.copy()
    iters = np.zeros(G, dtype=np.int64)
    converged = np.zeros(G, dtype=bool)
    active = np.arange(G)
    damp = np.ones(G)

    def loglik(eta_m, Bm, cols, log_1mp):
        # z-part of the clamped loglik: sum_i w z eta_c = XtwZ_j . B_j when no
        # observation is clipped; exact slice fallback for clipped columns
        lin = np.einsum("ij,ij->i", XtwZ[:, cols].T, Bm)
        clipped = np.flatnonzero(np.abs(eta_m).max(axis=0) > _ETA_CLIP)
        if clipped.size:
            etac = np.clip(eta_m[:, clipped], -_ETA_CLIP, _ETA_CLIP)
            lin[clipped] = np.einsum("ij,ij->j", wZ[:, cols[clipped]], etac)
        return lin + w @ log_1mp

    def stats(eta_m):
        Pc = link.cdf(eta_m)
        np.clip(Pc, CLAMP, 1.0 - CLAMP, out=Pc)
        log_1mp = np.log(1.0 - Pc)
        return Pc, log_1mp

    eta = X @ B.T
    Pc, log1mp = stats(eta)
    ll = loglik(eta, B, active, log1mp)

    for _ in range(MAX_ITER):
        if active.size == 0:
            break
        if is_logit:
            wP = w[:, None] * Pc
            grad = XtwZ[:, active] - X.T @ wP
            fw = wP * (1.0 - Pc)
        else:
            lam = link.density(eta)
            r = lam / (Pc * (1.0 - Pc))
            grad = X.T @ (w[:, None] * (r * (Z[:, active] - Pc)))
            fw = w[:, None] * (lam * r)
        Hflat = XO.T @ fw
        H = np.empty((active.size, p, p))
        H[:, iu, ju] = Hflat.T
        H[:, ju, iu] = Hflat.T
        delta = _solve_batch(H, grad.T)
        delta *= damp[active][:, None]
        iters[active] += 1

        # columns whose step is already below tolerance converge now; the
        # final (sub-1e-8) step needs no likelihood guard
        small = np.abs(delta).max(axis=1) < TOL_COEF
        if small.any():
            done_idx = active[small]
            B[done_idx] = B[done_idx] + delta[small]
            converged[done_idx] = True
            keep = ~small
            active = active[keep]
            if active.size == 0:
                break
            delta = delta[keep]
            eta = eta[:, keep]
            Pc = Pc[:, keep]

        Bnew = B[active] + delta
        eta_new = X @ Bnew.T
        Pc_new, log1mp_new = stats(eta_new)
        ll_new = loglik(eta_new, Bnew, active, log1mp_new)

        slack = 1e-10 * (1.0 + np.abs(ll[active]))
        worse = np.flatnonzero(ll_new < ll[active] - slack)
        halved = worse.copy()
        halvings = 0
        while worse.size and halvings < MAX_HALVINGS:
            delta[worse] *= 0.5
            cols = active[worse]
            Bh = B[cols] + delta[worse]
            eta_h = X @ Bh.T
            Pc_h, log1mp_h = stats(eta_h)
            ll_h = loglik(eta_h, Bh, cols, log1mp_h)
            Bnew[worse] = Bh
            eta_new[:, worse] = eta_h
            Pc_new[:, worse] = Pc_h
            ll_new[worse] = ll_h
            worse = worse[ll_h < ll[cols] - slack[worse]]
            halvings += 1
        if worse.size:
            # no ascent at fp precision: keep the previous point and stop
            Bnew[worse] = B[active[worse]]
            eta_new[:, worse] = eta[:, worse]
            Pc_new[:, worse] = Pc[:, worse]
            ll_new[worse] = ll[active[worse]]
            delta[worse] = 0.0
        if halved.size:
            idx = active[halved]
            damp[idx] = np.maximum(damp[idx] * 0.25, 2.0 ** -16)
        recovered = np.setdiff1d(np.flatnonzero(damp[active] < 1.0), halved,
                                 assume_unique=False)
        if recovered.size:
            idx = active[recovered]
            damp[idx] = np.minimum(damp[idx] * 2.0, 1.0)

        B[active] = Bnew
        gain = ll_new - ll[active]
        done = (np.abs(delta).max(axis=1) < TOL_COEF) | (
            np.abs(gain) <= TOL_LOGLIK * np.maximum(1.0, np.abs(ll_new))
        )
        if halved.size:
            # a halved step that bought < 1e-9 relative gain is on the plateau
            plateau = gain[halved] <= 1e-9 * (1.0 + np.abs(ll_new[halved]))
            done[halved[plateau]] = True
        ll[active] = ll_new
        converged[active[done]] = True
        if done.any():
            still = ~done
            active = active[still]
            eta = eta_new[:, still]
            Pc = Pc_new[:, still]
        else:
            eta = eta_new
            Pc = Pc_new

    return B, iters, converged


def _solve_batch(H, g):
    """Solve H[j] x = g[j] per threshold, ridge then neighbor fallback."""
    try:
        return np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        pass
    p = H.shape[1]
    out = np.zeros_like(g)
    eye = np.eye(p)
    for j in range(H.shape[0]):
        try:
            out[j] = np.linalg.solve(H[j], g[j])
        except np.linalg.LinAlgError:
            try:
                out[j] = np.linalg.solve(H[j] + RIDGE * eye, g[j])
            except np.linalg.LinAlgError:
                out[j] = 0.0
    return out


def fit_threshold(ds: TrialDataset, rows, threshold: float, variable: str,
                  link, weights=None):
    """Single-threshold weighted binary fit; reference for the batched path.

    Returns ``(coef, diag)`` where diag has keys iterations / converged /
    degenerate.
    """
    link = get_link(link) if isinstance(link, str) else link
    rows = np.asarray(rows)
    if rows.size == 0:
        raise ValueError("empty row set")
    X = ds.w[rows]
    z = (_variable(ds, variable)[rows] <= threshold).astype(float)
    w = _weight_values(weights, ds.n)[rows]
    keep = w > 0
    X, z, w = X[keep], z[keep], w[keep]
    m = float(w @ z) / float(w.sum())
    if m <= 0.0 or m >= 1.0:
        bound = CLAMP if m <= 0.0 else 1.0 - CLAMP
        coef = np.zeros(X.shape[1])
        coef[0] = link.inverse(bound)
        return coef, {"iterations": 0, "converged": True, "degenerate": True,
                      "fixed": bound}
    B0 = np.zeros((1, X.shape[1]))
    B0[0, 0] = link.inverse(m)
    B, iters, conv = _irls_batch(X, z[:, None], w, link, B0)
    return B[0], {"iterations": int(iters[0]), "converged": bool(conv[0]),
                  "degenerate": False, "fixed": np.nan}


def fit_model(ds: TrialDataset, key: SubgroupKey, variable: str, link,
              weights=None, cap: int = 500, grid=None,
              init_coef=None) -> ThresholdCdfModel:
    """Fit the full threshold-grid distribution regression for one subgroup.

    ``weights`` are per-dataset-row observation weights (bootstrap draws plug
    in here); rows with zero weight drop out of the likelihood. ``init_coef``
    warm-starts the solver (used by bootstrap refits); thresholds keep their
    default intercept-only start where it is nan.
    """
    link = get_link(link) if isinstance(link, str) else link
    rows = select(ds, key)
    if grid is None:
        grid = threshold_grid(ds, key, variable, cap)
    grid = np.asarray(grid, dtype=float)
    G = grid.size

    w_all = _weight_values(weights, ds.n)
    w = w_all[rows]
    keep = w > 0
    if not keep.any():
        raise ValueError(f"subgroup {key} has zero total weight")
    X = ds.w[rows[keep]]
    vals = _variable(ds, variable)[rows[keep]]
    w = w[keep]
    n, p = X.shape

    # two thresholds with no positive-weight observation between them pose
    # the identical likelihood: fit each distinct response column once
    order = np.argsort(vals, kind="stable")
    sorted_vals = vals[order]
    cum_w = np.cumsum(w[order])
    cnt = np.searchsorted(sorted_vals, grid, side="right")
    m = np.where(cnt > 0, cum_w[np.maximum(cnt - 1, 0)], 0.0) / cum_w[-1]

    lo = m <= 0.0
    hi = m >= 1.0
    degen = lo | hi
    fixed = np.full(G, np.nan)
    fixed[lo] = CLAMP
    fixed[hi] = 1.0 - CLAMP

    coef = np.zeros((G, p))
    iters = np.zeros(G, dtype=np.int64)
    conv = np.ones(G, dtype=bool)
    fit_idx = np.flatnonzero(~degen)
    if fit_idx.size:
        uniq_cnt, first, inv = np.unique(cnt[fit_idx], return_index=True,
                                         return_inverse=True)
        rep_idx = fit_idx[first]
        Z = (vals[:, None] <= grid[rep_idx][None, :]).astype(float)
        B0 = np.zeros((rep_idx.size, p))
        B0[:, 0] = link.inverse(np.clip(m[rep_idx], CLAMP, 1.0 - CLAMP))
        if init_coef is not None:
            given = np.isfinite(init_coef[rep_idx]).all(axis=1)
            B0[given] = init_coef[rep_idx[given]]
        B, it, cv = _irls_batch(X, Z, w, link, B0)
        coef[fit_idx] = B[inv]
        iters[fit_idx] = it[inv]
        conv[fit_idx] = cv[inv]
    # degenerate thresholds carry an intercept-only clamp fit so that raw
    # link predictions stay well-defined
    if degen.any():
        coef[degen, 0] = link.inverse(fixed[degen])

    return ThresholdCdfModel(
        subgroup=key,
        grid=grid,
        coef=coef,
        link_tag=link.tag,
        fixed=fixed,
        iterations=iters,
        converged=conv,
        degenerate=degen,
    )


def predict_cdf(model: ThresholdCdfModel, w: np.ndarray) -> np.ndarray:
    """Monotone conditional CDF over the model grid at covariate vector w."""
    return predict_cdf_matrix(model, np.asarray(w, dtype=float)[None, :])[0]


def predict_cdf_matrix(model: ThresholdCdfModel, W: np.ndarray) -> np.ndarray:
    """Row-wise monotone conditional CDFs: (m, p) covariates -> (m, G)."""
    raw = evaluate(model.link, W @ model.coef.T)
    fixed_cols = np.flatnonzero(model.degenerate)
    if fixed_cols.size:
        raw[:, fixed_cols] = model.fixed[fixed_cols]
    return monotone_rearrange(raw, axis=1)
