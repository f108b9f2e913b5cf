"""Log-likelihood, score and information matrices of the max-family model.

All functions take a :class:`~gumbelreg.model.DesignState` (possibly batched)
and evaluate the block formulas with the diagonal matrices stored as vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DesignState
from .specfun import EULER, gamma_derivs

__all__ = [
    "ScoreVector",
    "InfoMatrix",
    "loglik",
    "loglik_terms",
    "loglik_ratio",
    "score",
    "observed_info",
    "expected_info",
    "weighted_gram",
    "weighted_hessian_sum",
    "GAMMA2_AT_2",
]

#: Second derivative of the gamma function at 2.
GAMMA2_AT_2 = gamma_derivs(2.0).d2


@dataclass
class ScoreVector:
    u_beta: np.ndarray
    u_gamma: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.u_beta, self.u_gamma], axis=-1)


@dataclass
class InfoMatrix:
    """Symmetric information matrix in the ``(beta, gamma)`` layout."""

    full: np.ndarray
    kind: str
    k: int

    @property
    def beta_beta(self):
        return self.full[..., : self.k, : self.k]

    @property
    def beta_gamma(self):
        return self.full[..., : self.k, self.k :]

    @property
    def gamma_gamma(self):
        return self.full[..., self.k :, self.k :]


def _mirror_upper(a):
    """Copy the upper triangle onto the lower one so the result is exactly symmetric."""
    upper = np.triu(a)
    return upper + np.swapaxes(np.triu(a, 1), -1, -2)


def weighted_gram(a, w, b):
    """``A^T diag(w) B`` over the observation axis."""
    return np.swapaxes(a, -1, -2) @ (w[..., :, None] * b)


def weighted_hessian_sum(w, hess):
    """Contract an ``n``-vector with the first axis of an ``n x p x p`` array."""
    return np.einsum("...n,...nij->...ij", w, hess)


def loglik_terms(state: DesignState) -> np.ndarray:
    """Per-observation contributions ``-log(phi) - z - exp(-z)``."""
    return -np.log(state.phi) - state.z - state.zbrev


def loglik(state: DesignState):
    ll = loglik_terms(state).sum(axis=-1)
    return float(ll) if np.ndim(ll) == 0 else ll


def loglik_ratio(hat: DesignState, tilde: DesignState, shift=None):
    """``2 * (l(hat) - l(tilde))`` accumulated from per-observation differences.

    Differencing term by term (with ``expm1`` for the exponential part)
    avoids subtracting two large totals. With a
    :class:`~gumbelreg.model.DesignShift` the standardized residual change is
    formed from the parameter shift instead of from two rounded residuals,
    which keeps relative accuracy when the statistic is close to zero.
    """
    if shift is None:
        log_ratio = np.log(hat.phi / tilde.phi)
        dz = hat.z - tilde.z
    else:
        log_ratio = shift.log_ratio
        # z_hat - z_tilde = -z_hat * (phi_hat/phi_tilde - 1) - dmu / phi_tilde
        dz = -hat.z * shift.ratio_m1 - shift.dmu / tilde.phi
    d = -log_ratio - dz - tilde.zbrev * np.expm1(-dz)
    w = 2.0 * d.sum(axis=-1)
    return float(w) if np.ndim(w) == 0 else w


def score(state: DesignState) -> ScoreVector:
    inv_phi = 1.0 / state.phi
    wb = inv_phi * state.T * (1.0 - state.zbrev)
    wg = inv_phi * state.H * (state.z - state.z * state.zbrev - 1.0)
    u_beta = np.einsum("...nk,...n->...k", state.X, wb)
    u_gamma = np.einsum("...nm,...n->...m", state.Z, wg)
    return ScoreVector(u_beta, u_gamma)


def observed_info(state: DesignState) -> InfoMatrix:
    """Observed information ``J = -d^2 l / d theta d theta^T``."""
    phi, z, zb = state.phi, state.z, state.zbrev
    T, H, S, Q = state.T, state.H, state.S, state.Q
    inv_phi = 1.0 / phi
    w_bb = inv_phi * T * (zb * inv_phi + (1.0 - zb) * S * T) * T
    w_bg = inv_phi * T * (1.0 - zb + z * zb) * H * inv_phi
    w_gg = (
        inv_phi
        * H
        * ((-1.0 + 2.0 * z - 2.0 * z * zb + z * z * zb) * inv_phi + (-1.0 + z - z * zb) * Q * H)
        * H
    )
    j_bb = weighted_gram(state.X, w_bb, state.X)
    if state.Xdot is not None:
        j_bb = j_bb - weighted_hessian_sum((1.0 - zb) * T * inv_phi, state.Xdot)
    j_gg = weighted_gram(state.Z, w_gg, state.Z)
    if state.Zdot is not None:
        j_gg = j_gg + weighted_hessian_sum((1.0 - z + z * zb) * H * inv_phi, state.Zdot)
    j_bg = weighted_gram(state.X, w_bg, state.Z)
    return InfoMatrix(_assemble(j_bb, j_bg, j_gg), "observed", state.X.shape[-1])


def expected_info(state: DesignState) -> InfoMatrix:
    """Expected (Fisher) information ``I``."""
    inv_phi = 1.0 / state.phi
    T, H = state.T, state.H
    i_bb = weighted_gram(state.X, (T * inv_phi) ** 2, state.X)
    i_bg = (EULER - 1.0) * weighted_gram(state.X, T * H * inv_phi**2, state.Z)
    i_gg = (1.0 + GAMMA2_AT_2) * weighted_gram(state.Z, (H * inv_phi) ** 2, state.Z)
    return InfoMatrix(_assemble(i_bb, i_bg, i_gg), "expected", state.X.shape[-1])


def _assemble(bb, bg, gg):
    top = np.concatenate([_mirror_upper(bb), bg], axis=-1)
    bottom = np.concatenate([np.swapaxes(bg, -1, -2), _mirror_upper(gg)], axis=-1)
    return np.concatenate([top, bottom], axis=-2)
