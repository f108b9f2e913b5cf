"""Gamma-function derivatives, Gumbel weighted moments and chi-square tails.

The gamma derivatives are assembled from the digamma and trigamma functions,

    Gamma'(x)  = Gamma(x) psi(x)
    Gamma''(x) = Gamma(x) (psi(x)**2 + psi'(x)),

which are exact identities and well conditioned for the arguments used by the
coupling matrices (``1 + c`` with ``c`` a ratio of dispersions).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError

#: Euler-Mascheroni constant.
EULER = 0.57721566490153286060651209008240243

__all__ = [
    "EULER",
    "GammaTriple",
    "gamma_derivs",
    "gamma_triple_array",
    "gumbel_weighted_moment",
    "chi2_sf",
    "chi2_ppf",
]


@dataclass(frozen=True)
class GammaTriple:
    """``Gamma(x)`` together with its first and second derivatives."""

    gamma: float
    d1: float
    d2: float


def gamma_triple_array(x):
    """Vectorised ``(Gamma, Gamma', Gamma'')`` for an array of positive arguments.

    No domain checks; callers guarantee ``x > 0``.
    """
    x = np.asarray(x, dtype=float)
    g = special.gamma(x)
    psi = special.digamma(x)
    tri = special.polygamma(1, x)
    return g, g * psi, g * (psi * psi + tri)


def gamma_derivs(x: float) -> GammaTriple:
    """Return ``Gamma(x)``, ``Gamma'(x)`` and ``Gamma''(x)`` for ``x > 0``.

    Raises
    ------
    DomainError
        If ``x`` is not a finite positive number.
    """
    x = float(x)
    if not np.isfinite(x) or x <= 0.0:
        raise DomainError(f"gamma_derivs requires a finite x > 0, got {x!r}")
    g, d1, d2 = gamma_triple_array(x)
    return GammaTriple(float(g), float(d1), float(d2))


def gumbel_weighted_moment(n: int, c: float) -> float:
    """``E[z**n exp(-c z)]`` for ``z ~ EV_max(0, 1)``.

    Substituting ``v = exp(-z)`` turns the expectation into
    ``(-1)**n Gamma^{(n)}(1 + c)``.

    Parameters
    ----------
    n : {0, 1, 2}
        Power of ``z``.
    c : float
        Exponential tilt; must satisfy ``1 + c > 0``.
    """
    if n not in (0, 1, 2) or isinstance(n, bool):
        raise ValueError(f"n must be 0, 1 or 2, got {n!r}")
    c = float(c)
    if not np.isfinite(c) or 1.0 + c <= 0.0:
        raise DomainError(f"gumbel_weighted_moment requires 1 + c > 0, got c={c!r}")
    t = gamma_derivs(1.0 + c)
    return (t.gamma, -t.d1, t.d2)[n]


def chi2_sf(x, r):
    """Upper tail ``P(chi2_r > x)`` via the regularized incomplete gamma function.

    Accepts scalars or arrays for ``x``; a scalar input gives a float.
    """
    if isinstance(r, (bool, np.bool_)) or int(r) != r or r < 1:
        raise DomainError(f"degrees of freedom must be an integer >= 1, got {r!r}")
    xa = np.asarray(x, dtype=float)
    if np.any(np.isnan(xa)) or np.any(xa < 0.0):
        raise DomainError("chi2_sf requires x >= 0")
    out = special.gammaincc(0.5 * r, 0.5 * xa)
    if out.ndim == 0:
        return float(out)
    return out


def chi2_ppf(prob, r):
    """Quantile of the chi-square distribution with ``r`` degrees of freedom."""
    if isinstance(r, (bool, np.bool_)) or int(r) != r or r < 1:
        raise DomainError(f"degrees of freedom must be an integer >= 1, got {r!r}")
    pa = np.asarray(prob, dtype=float)
    if np.any(~((pa >= 0.0) & (pa <= 1.0))):
        raise DomainError("chi2_ppf requires probabilities in [0, 1]")
    out = 2.0 * special.gammaincinv(0.5 * r, pa)
    if out.ndim == 0:
        return float(out)
    return out
