"""Estimands: decomposed intention-to-treat effects and comparison estimators."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .counterfactual import (
    CounterfactualCdf,
    cf_mean,
    cf_quantile,
    two_sided_cf_cdf,
    unconditional_cf_cdf,
)
from .dataset import T0, T0D0, T1, T1D0, T1D1, SubgroupKey, TrialDataset, select
from .distreg import _weight_values, fit_model, threshold_grid

__all__ = [
    "EffectEstimate",
    "EstimatorSettings",
    "ReplicateError",
    "itt",
    "itt_by_takeup",
    "quantile_difference",
    "att_envelope",
    "late_net",
    "two_sided_ittna",
    "ols_baselines",
    "iv_att",
    "weighted_quantile",
    "compute_estimates",
    "prepare_warm_state",
]


class ReplicateError(RuntimeError):
    """A (possibly reweighted) sample cannot support the requested estimand."""


@dataclass
class EffectEstimate:
    """Point estimate with optional bootstrap inference attachments."""

    name: str
    point: float
    draws: np.ndarray | None = field(default=None, repr=False)
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None

    def stars(self) -> str:
        """Significance stars at the 10/5/1% levels from |point|/se."""
        if not self.se or self.se <= 0:
            return ""
        z = abs(self.point) / self.se
        return "*" * int(np.sum(z > norm.ppf(1.0 - np.array([0.10, 0.05, 0.01]) / 2)))


@dataclass(frozen=True)
class EstimatorSettings:
    link: str = "logit"
    cap: int = 500
    taus: tuple = tuple(np.round(np.arange(0.1, 0.91, 0.1), 10))
    late_factor: str = "appendix"
    include_late: bool = False
    include_two_sided: bool = False

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        if taus.size and (np.any(np.diff(taus) <= 0) or taus.min() <= 0 or taus.max() >= 1):
            raise ValueError("tau grid must be strictly increasing inside (0,1)")
        if self.late_factor not in ("appendix", "maintext"):
            raise ValueError("late_factor must be 'appendix' or 'maintext'")


def _wmean(values, weights) -> float:
    total = weights.sum()
    if total <= 0:
        raise ReplicateError("zero total weight in subgroup")
    return float(weights @ values / total)


def weighted_quantile(values, weights, taus):
    """Smallest observed value whose weighted ECDF reaches tau (inf-based)."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    if cw[-1] <= 0:
        raise ReplicateError("zero total weight in subgroup")
    cdf = cw / cw[-1]
    idx = np.minimum(np.searchsorted(cdf, taus, side="left"), v.size - 1)
    return v[idx]


def itt(ds: TrialDataset, weights=None) -> EffectEstimate:
    """Difference of weighted outcome means between the assignment arms."""
    w = _weight_values(weights, ds.n)
    i1, i0 = select(ds, T1), select(ds, T0)
    point = _wmean(ds.y[i1], w[i1]) - _wmean(ds.y[i0], w[i0])
    return EffectEstimate("ITT", point)


MODEL_SPECS = {
    "control": (T0, "outcome"),
    "proxy_all": (T1, "proxy"),
    "proxy_d1": (T1D1, "proxy"),
    "proxy_d0": (T1D0, "proxy"),
    "control00": (T0D0, "outcome"),
    "proxy00": (T0D0, "proxy"),
}


def prepare_warm_state(ds: TrialDataset, settings: EstimatorSettings) -> dict:
    """Threshold grids shared by every bootstrap replicate."""
    names = ["control", "proxy_all", "proxy_d1", "proxy_d0"]
    if settings.include_two_sided:
        names += ["control00", "proxy00"]
    grids = {}
    for name in names:
        key, variable = MODEL_SPECS[name]
        grids[name] = threshold_grid(ds, key, variable, settings.cap)
    return {"grids": grids, "coefs": {}}


def _fit_models(ds, settings, w, warm):
    models = {}
    for name, grid in warm["grids"].items():
        key, variable = MODEL_SPECS[name]
        try:
            models[name] = fit_model(
                ds, key, variable, settings.link, weights=w, cap=settings.cap,
                grid=grid, init_coef=warm["coefs"].get(name),
            )
        except ValueError as exc:
            raise ReplicateError(str(exc)) from exc
    return models


def compute_estimates(ds: TrialDataset, settings: EstimatorSettings,
                      weights=None, warm=None,
                      keep_models=False):
    """One full pass of the estimation pipeline under given observation weights.

    Returns a flat dict of scalars and per-tau vectors; this is the unit of
    work the bootstrap re-runs per replicate. ``warm`` carries the shared
    threshold grids and (for replicates) the point fit's coefficients.
    """
    if warm is None:
        warm = prepare_warm_state(ds, settings)
    w = _weight_values(weights, ds.n)
    models = _fit_models(ds, settings, w, warm)
    taus = np.asarray(settings.taus, dtype=float)

    i1, i0 = select(ds, T1), select(ds, T0)
    i11, i10 = select(ds, T1D1), select(ds, T1D0)
    mean_t1 = _wmean(ds.y[i1], w[i1])
    mean_t0 = _wmean(ds.y[i0], w[i0])
    out = {"ITT": mean_t1 - mean_t0}

    cfs = {}
    for d, name, idx in ((1, "proxy_d1", i11), (0, "proxy_d0", i10)):
        cf = unconditional_cf_cdf(
            ds,
            {"control": models["control"], "proxy_all": models["proxy_all"],
             "proxy_d": models[name]},
            SubgroupKey(1, d), weights=w,
        )
        cfs[d] = cf
        sub_mean = _wmean(ds.y[idx], w[idx])
        out[f"cf_mean_{d}"] = cf_mean(cf)
        out["ITTTA" if d == 1 else "ITTNA"] = sub_mean - out[f"cf_mean_{d}"]
        out[f"mean_y_1{d}"] = sub_mean
        if taus.size:
            q_obs = weighted_quantile(ds.y[idx], w[idx], taus)
            out[f"QTT_d{d}"] = q_obs - cf_quantile(cf, taus)
    out["ATT_envelope"] = out["ITTTA"] - out["ITTNA"]
    out["p_takeup"] = float(w[i11].sum() / w[i1].sum())
    out["mean_y_t1"] = mean_t1
    out["mean_y_t0"] = mean_t0

    if settings.include_two_sided:
        cf2 = two_sided_cf_cdf(
            ds,
            {"control00": models["control00"], "proxy00": models["proxy00"],
             "proxy10": models["proxy_d0"]},
            weights=w,
        )
        cfs["two_sided"] = cf2
        out["two_sided_ITTNA"] = _wmean(ds.y[i10], w[i10]) - cf_mean(cf2)
    if settings.include_late:
        p1 = out["p_takeup"]
        p0 = _wmean(ds.d[i0].astype(float), w[i0])
        out["LATE_net"] = _late_from_parts(out["ATT_envelope"], p1, p0,
                                           settings.late_factor)

    if keep_models:
        out["_models"] = models
        out["_cfs"] = cfs
    return out


def _late_from_parts(envelope: float, p1: float, p0: float, factor: str) -> float:
    compliance = p1 - p0
    if compliance <= 0:
        raise ReplicateError(
            f"nonpositive first-stage share: P(D=1|T=1)={p1:.4f} <= P(D=1|T=0)={p0:.4f}"
        )
    scale = compliance / p1 if factor == "appendix" else p1 / compliance
    return envelope * scale


def itt_by_takeup(ds: TrialDataset, d: int, link="logit", weights=None,
                  cap: int = 500) -> EffectEstimate:
    """Subgroup outcome mean minus the counterfactual mean (d=1: ITTTA, d=0: ITTNA)."""
    settings = EstimatorSettings(link=link if isinstance(link, str) else link.tag,
                                 cap=cap, taus=())
    vals = compute_estimates(ds, settings, weights=weights)
    name = "ITTTA" if d == 1 else "ITTNA"
    return EffectEstimate(name, vals[name])


def quantile_difference(ds: TrialDataset, d: int, tau_grid, link="logit",
                        weights=None, cap: int = 500) -> np.ndarray:
    """Observed-minus-counterfactual quantiles at each tau for subgroup d."""
    settings = EstimatorSettings(link=link if isinstance(link, str) else link.tag,
                                 cap=cap, taus=tuple(np.asarray(tau_grid, float)))
    vals = compute_estimates(ds, settings, weights=weights)
    return vals[f"QTT_d{d}"]


def att_envelope(itta: EffectEstimate, ittna: EffectEstimate) -> EffectEstimate:
    """ITTTA minus ITTNA, replicate-by-replicate on the bootstrap draws."""
    draws = None
    if itta.draws is not None and ittna.draws is not None:
        draws = itta.draws - ittna.draws
    return EffectEstimate("ATT_envelope", itta.point - ittna.point, draws=draws)


def late_net(itta: EffectEstimate, ittna: EffectEstimate, ds: TrialDataset,
             weights=None, factor: str = "appendix") -> EffectEstimate:
    """Net take-up effect for compliers under direct-effect homogeneity."""
    w = _weight_values(weights, ds.n)
    i1, i0 = select(ds, T1), select(ds, T0)
    p1 = _wmean(ds.d[i1].astype(float), w[i1])
    p0 = _wmean(ds.d[i0].astype(float), w[i0])
    env = att_envelope(itta, ittna)
    point = _late_from_parts(env.point, p1, p0, factor)
    draws = None
    if env.draws is not None:
        scale = point / env.point if env.point != 0 else (p1 - p0) / p1
        draws = env.draws * scale
    return EffectEstimate("LATE_net", point, draws=draws)


def two_sided_ittna(ds: TrialDataset, link="logit", weights=None,
                    cap: int = 500) -> EffectEstimate:
    """ITTNA identified through the {T=0,D=0} / {T=1,D=0} composition."""
    settings = EstimatorSettings(link=link if isinstance(link, str) else link.tag,
                                 cap=cap, taus=(), include_two_sided=True)
    vals = compute_estimates(ds, settings, weights=weights)
    return EffectEstimate("two_sided_ITTNA", vals["two_sided_ITTNA"])


def _cluster_sums(scores: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    order = np.argsort(cluster, kind="stable")
    sc = scores[order]
    cl = cluster[order]
    starts = np.flatnonzero(np.r_[True, cl[1:] != cl[:-1]])
    return np.add.reduceat(sc, starts, axis=0)


def _cr1_cov(bread_inv, scores, cluster, n, p):
    S = _cluster_sums(scores, cluster)
    n_cl = S.shape[0]
    meat = S.T @ S
    factor = 1.0
    if n_cl > 1 and n > p:
        factor = (n_cl / (n_cl - 1.0)) * ((n - 1.0) / (n - p))
    return factor * bread_inv @ meat @ bread_inv.T


def ols_baselines(ds: TrialDataset, d: int | None, weights=None) -> EffectEstimate:
    """OLS of Y on (W, T) treating take-up as exogenous.

    d=1 fits on {T=1,D=1} u {T=0} (OLS_ITTTA), d=0 on {T=1,D=0} u {T=0}
    (OLS_ITTNA), d=None on all rows (OLS_ITT); reports the T coefficient
    with a cluster-robust standard error.
    """
    w = _weight_values(weights, ds.n)
    if d is None:
        rows = np.arange(ds.n)
        name = "OLS_ITT"
    else:
        rows = np.r_[select(ds, SubgroupKey(1, d)), select(ds, T0)]
        name = "OLS_ITTTA" if d == 1 else "OLS_ITTNA"
    X = np.column_stack([ds.w[rows], ds.t[rows].astype(float)])
    y = ds.y[rows]
    ww = w[rows]
    n, p = X.shape
    sw = np.sqrt(ww)
    beta, _, rank, _ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    if rank < p:
        raise ReplicateError(f"rank-deficient design in {name}")
    resid = y - X @ beta
    bread_inv = np.linalg.inv(X.T @ (X * ww[:, None]))
    V = _cr1_cov(bread_inv, X * (ww * resid)[:, None], ds.cluster[rows], n, p)
    se = float(np.sqrt(V[-1, -1]))
    z = norm.ppf(0.975)
    return EffectEstimate(name, float(beta[-1]), se=se,
                          ci_low=float(beta[-1] - z * se),
                          ci_high=float(beta[-1] + z * se))


def iv_att(ds: TrialDataset, weights=None) -> EffectEstimate:
    """Just-identified 2SLS of Y on (W, D) instrumenting D with T."""
    w = _weight_values(weights, ds.n)
    t = ds.t.astype(float)
    dvar = ds.d.astype(float)
    total = w.sum()
    tbar = w @ t / total
    dbar = w @ dvar / total
    cov_td = w @ ((t - tbar) * (dvar - dbar)) / total
    if abs(cov_td) < 1e-12:
        raise ReplicateError("weak first stage: |Cov(T,D)| < 1e-12")
    X = np.column_stack([ds.w, dvar])
    Z = np.column_stack([ds.w, t])
    n, p = X.shape
    A = Z.T @ (X * w[:, None])
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise ReplicateError("singular instrument cross-moment matrix") from exc
    beta = A_inv @ (Z.T @ (w * ds.y))
    resid = ds.y - X @ beta
    V = _cr1_cov(A_inv, Z * (w * resid)[:, None], ds.cluster, n, p)
    se = float(np.sqrt(V[-1, -1]))
    z = norm.ppf(0.975)
    return EffectEstimate("IV_ATT", float(beta[-1]), se=se,
                          ci_low=float(beta[-1] - z * se),
                          ci_high=float(beta[-1] + z * se))
