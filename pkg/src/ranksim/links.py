"""Link functions for distribution regression.

Each link provides the cdf ``x -> P(y=1)`` used to model conditional
distribution functions as ``F(y|w) = cdf(w'beta(y))``, together with its
density. Probabilities are clamped away from {0,1} so that quasi-separated
threshold fits keep a finite log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr, ndtri

__all__ = [
    "CLAMP",
    "LinkFunction",
    "LINKS",
    "get_link",
    "evaluate",
    "fisher_weight",
]

# one-sided distance from the {0,1} boundary for clamped probabilities
CLAMP = 1e-12

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class LinkFunction:
    """A cdf/density pair usable as a binary-regression link."""

    tag: str
    cdf: Callable[[np.ndarray], np.ndarray]
    density: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    symmetric: bool

    def __repr__(self) -> str:  # keep model reprs short
        return f"LinkFunction({self.tag!r})"


def _logit_cdf(x):
    return expit(x)


def _logit_pdf(x):
    p = expit(x)
    return p * (1.0 - p)


def _logit_inv(p):
    return np.log(p) - np.log1p(-p)


def _probit_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def _cloglog_cdf(x):
    return -np.expm1(-np.exp(np.minimum(x, 700.0)))


def _cloglog_pdf(x):
    xc = np.minimum(x, 700.0)
    return np.exp(xc - np.exp(xc))


def _cloglog_inv(p):
    return np.log(-np.log1p(-np.asarray(p, dtype=float)))


def _cauchit_cdf(x):
    return 0.5 + np.arctan(x) / np.pi


def _cauchit_pdf(x):
    return 1.0 / (np.pi * (1.0 + np.square(x)))


def _cauchit_inv(p):
    return np.tan(np.pi * (np.asarray(p, dtype=float) - 0.5))


LINKS = {
    "logit": LinkFunction("logit", _logit_cdf, _logit_pdf, _logit_inv, True),
    "probit": LinkFunction("probit", ndtr, _probit_pdf, ndtri, True),
    "cloglog": LinkFunction("cloglog", _cloglog_cdf, _cloglog_pdf, _cloglog_inv, False),
    "cauchit": LinkFunction("cauchit", _cauchit_cdf, _cauchit_pdf, _cauchit_inv, True),
}


def get_link(tag: str) -> LinkFunction:
    try:
        return LINKS[tag]
    except KeyError:
        raise ValueError(f"unknown link {tag!r}; choose from {sorted(LINKS)}") from None


def evaluate(link: LinkFunction, x) -> np.ndarray:
    """Clamped link cdf, guaranteed inside [CLAMP, 1-CLAMP]."""
    return np.clip(link.cdf(np.asarray(x, dtype=float)), CLAMP, 1.0 - CLAMP)


def fisher_weight(link: LinkFunction, x) -> np.ndarray:
    """Information weight density(x)^2 / (cdf(x)(1-cdf(x))) with clamped cdf."""
    x = np.asarray(x, dtype=float)
    p = evaluate(link, x)
    lam = link.density(x)
    return np.square(lam) / (p * (1.0 - p))
