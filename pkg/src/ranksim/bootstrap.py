"""Exchangeable and cluster-exchangeable bootstrap over the estimation pipeline.

Replicate b draws its weights from an RNG stream keyed by (seed, b), so
results are identical whether replicates run sequentially or in parallel.
"""

from __future__ import annotations

import logging
import multiprocessing
import os
from dataclasses import dataclass

import numpy as np

from .dataset import TrialDataset
from .distreg import WeightVector
from .effects import EstimatorSettings, ReplicateError, compute_estimates, prepare_warm_state

__all__ = [
    "BootstrapPlan",
    "BandResult",
    "draw_weights",
    "row_weights",
    "bootstrap_pipeline",
    "summarize",
    "uniform_band",
]

log = logging.getLogger(__name__)

MAX_DROP_FRACTION = 0.05


@dataclass(frozen=True)
class BootstrapPlan:
    scheme: str = "multinomial"
    level: str = "auto"  # cluster when labels exist, else row
    n_replicates: int = 300
    seed: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        if self.scheme not in ("multinomial", "bayesian"):
            raise ValueError("scheme must be 'multinomial' or 'bayesian'")
        if self.level not in ("auto", "row", "cluster"):
            raise ValueError("level must be 'auto', 'row', or 'cluster'")
        if self.n_replicates < 0:
            raise ValueError("replicate count must be nonnegative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be inside (0,1)")

    def resolve_level(self, ds: TrialDataset) -> str:
        if self.level != "auto":
            return self.level
        return "cluster" if ds.has_clusters else "row"


def _replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, b)))


def draw_weights(plan: BootstrapPlan, n_units: int, rng) -> np.ndarray:
    """One weight per unit: multinomial counts or mean-one exponentials."""
    if n_units < 1:
        raise ValueError("need at least one unit")
    if plan.scheme == "multinomial":
        return rng.multinomial(n_units, np.full(n_units, 1.0 / n_units)).astype(float)
    w = rng.standard_exponential(n_units)
    return w / w.mean()


def row_weights(plan: BootstrapPlan, ds: TrialDataset, b: int) -> WeightVector:
    """Replicate b's per-row weights (cluster draws broadcast to member rows)."""
    rng = _replicate_rng(plan.seed, b)
    if plan.resolve_level(ds) == "cluster":
        per_unit = draw_weights(plan, ds.n_clusters, rng)
        return WeightVector(per_unit[ds.cluster])
    return WeightVector(draw_weights(plan, ds.n, rng))


_WORKER_STATE: dict = {}


def _init_worker(ds, settings, warm, plan):
    _WORKER_STATE["args"] = (ds, settings, warm, plan)


def _run_replicate(b: int):
    ds, settings, warm, plan = _WORKER_STATE["args"]
    return _replicate_values(ds, settings, warm, plan, b)


def _replicate_values(ds, settings, warm, plan, b):
    w = row_weights(plan, ds, b)
    try:
        return compute_estimates(ds, settings, weights=w, warm=warm)
    except ReplicateError as exc:
        return ("dropped", str(exc))


def bootstrap_pipeline(ds: TrialDataset, settings: EstimatorSettings,
                       plan: BootstrapPlan, warm=None, point=None, workers=1):
    """Point estimates plus per-estimand bootstrap draws.

    Returns ``(point_values, draws)`` where ``draws`` maps each estimand to a
    (B,) or (B, n_tau) array. Replicates whose reweighted subgroups collapse
    are dropped and logged; more than 5% drops is an error.
    """
    if warm is None:
        warm = prepare_warm_state(ds, settings)
    if point is None:
        point = compute_estimates(ds, settings, warm=warm, keep_models=True)
        warm = dict(warm)
        warm["coefs"] = {name: m.coef for name, m in point["_models"].items()}

    B = plan.n_replicates
    keys = [k for k in point if not k.startswith("_")]
    if B == 0:
        return point, {}

    if workers and workers > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker,
                      initargs=(ds, settings, warm, plan)) as pool:
            results = pool.map(_run_replicate, range(B), chunksize=8)
    else:
        results = [_replicate_values(ds, settings, warm, plan, b) for b in range(B)]

    kept = [r for r in results if not (isinstance(r, tuple) and r[0] == "dropped")]
    n_dropped = B - len(kept)
    if n_dropped:
        log.warning("dropped %d of %d bootstrap replicates", n_dropped, B)
    if n_dropped > MAX_DROP_FRACTION * B:
        raise RuntimeError(
            f"{n_dropped}/{B} bootstrap replicates dropped (> {MAX_DROP_FRACTION:.0%})"
        )
    draws = {k: np.asarray([r[k] for r in kept]) for k in keys}
    return point, draws


def summarize(draws: np.ndarray, point: float, alpha: float = 0.05):
    """Bootstrap se and equal-tailed percentile interval."""
    draws = np.asarray(draws, dtype=float)
    if draws.shape[0] < 2:
        raise ValueError("need at least two bootstrap draws")
    se = float(np.std(draws, ddof=1))
    lo, hi = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0])
    return se, float(lo), float(hi)


@dataclass(frozen=True)
class BandResult:
    """Sup-t simultaneous band over a tau grid."""

    tau_grid: np.ndarray
    point: np.ndarray
    se: np.ndarray
    t_star: float
    lo: np.ndarray
    hi: np.ndarray
    excluded: np.ndarray  # taus with zero bootstrap variance, not banded


def uniform_band(curve_draws: np.ndarray, point_curve: np.ndarray,
                 alpha: float = 0.05, tau_grid=None) -> BandResult:
    """Symmetric sup-t band: point +- t* se with t* the (1-alpha) quantile of
    the bootstrap max absolute standardized deviation."""
    curve_draws = np.asarray(curve_draws, dtype=float)
    point_curve = np.asarray(point_curve, dtype=float)
    if tau_grid is None:
        tau_grid = np.arange(1, point_curve.size + 1, dtype=float)
    se = np.std(curve_draws, axis=0, ddof=1)
    ok = se > 0
    if not ok.any():
        raise ValueError("all taus have zero bootstrap variance")
    dev = np.abs(curve_draws[:, ok] - point_curve[ok]) / se[ok]
    t_star = float(np.quantile(dev.max(axis=1), 1.0 - alpha))
    lo = np.where(ok, point_curve - t_star * se, point_curve)
    hi = np.where(ok, point_curve + t_star * se, point_curve)
    return BandResult(
        tau_grid=np.asarray(tau_grid, dtype=float),
        point=point_curve,
        se=se,
        t_star=t_star,
        lo=lo,
        hi=hi,
        excluded=~ok,
    )
