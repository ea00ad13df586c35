"""Trial data container, subgroup selection, and threshold grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = [
    "TrialDataset",
    "SubgroupKey",
    "T1",
    "T0",
    "T1D1",
    "T1D0",
    "T0D0",
    "DataError",
    "load_csv",
    "load_schema",
    "select",
    "threshold_grid",
    "filter_positive_proxy",
]


class DataError(ValueError):
    """Raised when input data violate the trial-design contract."""


@dataclass(frozen=True)
class SubgroupKey:
    """Conditioning cell: assignment arm ``t`` and optional take-up ``d``."""

    t: int
    d: int | None = None

    def __post_init__(self):
        if (self.t, self.d) not in {(1, None), (0, None), (1, 1), (1, 0), (0, 0)}:
            raise ValueError(f"unsupported subgroup {{T={self.t}, D={self.d}}}")

    def __str__(self) -> str:
        return f"{{T={self.t}}}" if self.d is None else f"{{T={self.t},D={self.d}}}"


T1 = SubgroupKey(1)
T0 = SubgroupKey(0)
T1D1 = SubgroupKey(1, 1)
T1D0 = SubgroupKey(1, 0)
T0D0 = SubgroupKey(0, 0)


@dataclass(frozen=True)
class TrialDataset:
    """Validated trial sample.

    Arrays are aligned by row: outcome ``y``, baseline proxy ``y_b``, take-up
    ``d``, assignment ``t``, design matrix ``w`` (leading column of ones), and
    integer ``cluster`` labels (every row its own cluster when none were
    supplied). All arrays are read-only; the dataset is safe to share across
    workers.
    """

    y: np.ndarray
    y_b: np.ndarray
    d: np.ndarray
    t: np.ndarray
    w: np.ndarray
    cluster: np.ndarray
    mode: str = "one-sided"
    covariate_names: tuple[str, ...] = ()
    has_clusters: bool = False

    def __post_init__(self):
        for name in ("y", "y_b", "d", "t", "w", "cluster"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        n = self.y.shape[0]
        if self.mode not in ("one-sided", "two-sided"):
            raise DataError(f"mode must be one-sided or two-sided, got {self.mode!r}")
        for name in ("y_b", "d", "t", "cluster"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"column {name} has wrong length")
        if self.w.ndim != 2 or self.w.shape[0] != n or self.w.shape[1] < 1:
            raise DataError("design matrix must be n x p with p >= 1")
        if not np.all(self.w[:, 0] == 1.0):
            raise DataError("design matrix must carry a leading intercept column")
        for name in ("d", "t"):
            vals = getattr(self, name)
            if not np.isin(vals, (0, 1)).all():
                raise DataError(f"{name} must be binary 0/1")
        if self.mode == "one-sided" and np.any((self.t == 0) & (self.d == 1)):
            bad = int(((self.t == 0) & (self.d == 1)).sum())
            raise DataError(
                f"one-sided design violated: {bad} rows with T=0 and D=1"
            )
        if not (np.isfinite(self.y).all() and np.isfinite(self.y_b).all()
                and np.isfinite(self.w).all()):
            raise DataError("non-finite values in y, y_b, or covariates")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.cluster).size)

    def counts(self) -> dict:
        """Row counts by subgroup plus cluster count."""
        t, d = self.t, self.d
        return {
            "n": self.n,
            "n_1": int((t == 1).sum()),
            "n_0": int((t == 0).sum()),
            "n_11": int(((t == 1) & (d == 1)).sum()),
            "n_10": int(((t == 1) & (d == 0)).sum()),
            "n_clusters": self.n_clusters,
        }

    def cluster_assignment_constant(self) -> bool:
        """True when every cluster is entirely in one arm."""
        order = np.argsort(self.cluster, kind="stable")
        c, t = self.cluster[order], self.t[order]
        starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
        return all(
            t[a:b].min() == t[a:b].max()
            for a, b in zip(starts, np.r_[starts[1:], c.size])
        )

    def to_frame(self) -> pd.DataFrame:
        cols = {"y": self.y, "y_b": self.y_b, "d": self.d, "t": self.t}
        names = self.covariate_names or tuple(
            f"w{j}" for j in range(1, self.p)
        )
        for j, name in enumerate(names, start=1):
            cols[name] = self.w[:, j]
        if self.has_clusters:
            cols["cluster"] = self.cluster
        return pd.DataFrame(cols)


def from_arrays(
    y, y_b, d, t, covariates=None, cluster=None, mode="one-sided",
    covariate_names=(),
) -> TrialDataset:
    """Assemble a dataset from raw arrays; prepends the intercept column."""
    y = np.ascontiguousarray(y, dtype=float)
    n = y.shape[0]
    if n == 0:
        raise DataError("empty dataset")
    if covariates is None:
        w = np.ones((n, 1))
    else:
        cov = np.asarray(covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        if cov.shape[0] != n:
            raise DataError("covariate rows do not match outcome length")
        w = np.column_stack([np.ones(n), cov])
    has_clusters = cluster is not None
    cl = (np.arange(n) if cluster is None
          else _encode_clusters(np.asarray(cluster)))
    return TrialDataset(
        y=y,
        y_b=np.ascontiguousarray(y_b, dtype=float),
        d=np.ascontiguousarray(d, dtype=np.int8),
        t=np.ascontiguousarray(t, dtype=np.int8),
        w=np.ascontiguousarray(w),
        cluster=cl,
        mode=mode,
        covariate_names=tuple(covariate_names),
        has_clusters=has_clusters,
    )


def _encode_clusters(raw: np.ndarray) -> np.ndarray:
    _, codes = np.unique(raw, return_inverse=True)
    return np.ascontiguousarray(codes, dtype=np.int64)


def load_schema(path) -> dict:
    """Read the role -> column-name mapping from a JSON config file."""
    schema = json.loads(Path(path).read_text())
    for role in ("outcome", "proxy", "treatment", "assignment"):
        if role not in schema:
            raise DataError(f"schema is missing required role {role!r}")
    schema.setdefault("covariates", [])
    return schema


def load_csv(path, schema, mode="one-sided") -> TrialDataset:
    """Load and validate a trial CSV.

    ``schema`` maps the roles {outcome, proxy, treatment, assignment,
    cluster, covariates[]} to column names (a dict, or a path to a JSON file
    with that mapping). Rows with any missing mapped field are dropped
    (strict complete-case rule); the drop count is recorded on the returned
    dataset's ``counts()`` caller side via a DataError if all rows vanish.
    """
    if not isinstance(schema, dict):
        schema = load_schema(schema)
    frame = pd.read_csv(path)
    mapped = [schema["outcome"], schema["proxy"], schema["treatment"],
              schema["assignment"]]
    mapped += list(schema.get("covariates") or [])
    if schema.get("cluster"):
        mapped.append(schema["cluster"])
    missing = [c for c in mapped if c not in frame.columns]
    if missing:
        raise DataError(f"columns not found in {path}: {missing}")

    numeric = [c for c in mapped if c != schema.get("cluster")]
    for col in numeric:
        frame[col] = pd.to_numeric(frame[col], errors="coerce")
    complete = frame[mapped].notna().all(axis=1)
    n_dropped = int((~complete).sum())
    frame = frame.loc[complete]
    if frame.empty:
        raise DataError("no complete-case rows after missing-value filtering")

    covs = list(schema.get("covariates") or [])
    ds = from_arrays(
        y=frame[schema["outcome"]].to_numpy(),
        y_b=frame[schema["proxy"]].to_numpy(),
        d=_binary(frame[schema["treatment"]], "treatment"),
        t=_binary(frame[schema["assignment"]], "assignment"),
        covariates=frame[covs].to_numpy() if covs else None,
        cluster=frame[schema["cluster"]].to_numpy() if schema.get("cluster") else None,
        mode=mode,
        covariate_names=covs,
    )
    object.__setattr__(ds, "_n_dropped", n_dropped)
    return ds


def _binary(series: pd.Series, role: str) -> np.ndarray:
    vals = series.to_numpy(dtype=float)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise DataError(f"{role} column must contain only 0/1")
    return vals.astype(np.int8)


def select(ds: TrialDataset, key: SubgroupKey) -> np.ndarray:
    """Row indices of a subgroup, in row order. Empty subgroups are an error."""
    mask = ds.t == key.t
    if key.d is not None:
        mask &= ds.d == key.d
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DataError(f"subgroup {key} is empty")
    return idx


def threshold_grid(ds: TrialDataset, key: SubgroupKey, variable: str,
                   cap: int = 500) -> np.ndarray:
    """Sorted unique subgroup values of ``variable``, quantile-thinned to ``cap``.

    When more than ``cap`` distinct values are observed the grid keeps the
    values at ``cap`` evenly spaced empirical quantiles, always retaining the
    subgroup minimum and maximum; the result is strictly increasing.
    """
    if cap < 1:
        raise ValueError("cap must be a positive integer")
    values = _variable(ds, variable)[select(ds, key)]
    uniq = np.unique(values)
    if uniq.size <= cap:
        return uniq
    qs = np.linspace(0.0, 1.0, cap)
    grid = np.quantile(values, qs, method="inverted_cdf")
    grid = np.unique(np.r_[uniq[0], grid, uniq[-1]])
    return grid


def _variable(ds: TrialDataset, variable: str) -> np.ndarray:
    if variable == "outcome":
        return ds.y
    if variable == "proxy":
        return ds.y_b
    raise ValueError("variable must be 'outcome' or 'proxy'")


def filter_positive_proxy(ds: TrialDataset) -> TrialDataset:
    """Drop rows with proxy <= 0 (explicit sample-selection helper)."""
    keep = ds.y_b > 0
    if not keep.any():
        raise DataError("no rows with positive proxy values")
    return TrialDataset(
        y=ds.y[keep],
        y_b=ds.y_b[keep],
        d=ds.d[keep],
        t=ds.t[keep],
        w=ds.w[keep],
        cluster=ds.cluster[keep],
        mode=ds.mode,
        covariate_names=ds.covariate_names,
        has_clusters=ds.has_clusters,
    )
