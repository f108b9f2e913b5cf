"""Skovgaard's adjusted likelihood ratio statistic for extreme-value regression.

The adjustment needs two cross-expectations of the score,

    q       = E_1[ U(theta_1) (l(theta_1) - l(theta)) ]
    Upsilon = E_1[ U(theta_1) U(theta)^T ],

evaluated at theta_1 = unrestricted MLE ("hat") and theta = restricted MLE
("tilde"). Both have closed forms in terms of diagonal coupling matrices
built from the two fitted location/dispersion vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SingularMatrixError
from .likelihood import loglik_ratio, weighted_gram
from .model import DesignState, design_shift
from .specfun import EULER, gamma_triple_array

__all__ = [
    "CouplingMatrices",
    "SkovgaardParts",
    "coupling",
    "qbar",
    "upsilon_bar",
    "adjusted_lr",
    "skovgaard_core",
    "SMALL_W",
    "COND_LIMIT",
]

SMALL_W = 1e-8
COND_LIMIT = 1e12


@dataclass
class CouplingMatrices:
    """Diagonals ``C, D, Dbrev, M, N, P`` (each of shape ``(..., n)``)."""

    C: np.ndarray
    D: np.ndarray
    Dbrev: np.ndarray
    M: np.ndarray
    N: np.ndarray
    P: np.ndarray


def coupling(hat: DesignState, tilde: DesignState, shift=None) -> CouplingMatrices:
    """Coupling diagonals; ``shift`` (a DesignShift) sharpens ``C`` and ``D``."""
    if shift is None:
        C = hat.phi / tilde.phi
        D = (hat.mu - tilde.mu) / tilde.phi
    else:
        C = 1.0 + shift.ratio_m1
        D = shift.dmu / tilde.phi
    if not np.all(C > 0.0):
        raise DomainError("dispersion ratio must be positive")
    M, N, P = gamma_triple_array(1.0 + C)
    return CouplingMatrices(C=C, D=D, Dbrev=np.exp(-D), M=M, N=N, P=P)


def qbar(hat: DesignState, tilde: DesignState, cm: CouplingMatrices | None = None) -> np.ndarray:
    """Closed form of ``q`` with ``theta_1 -> hat`` and ``theta -> tilde``."""
    cm = cm or coupling(hat, tilde)
    a_hat = hat.T / hat.phi
    b_hat = hat.H / hat.phi
    top = np.einsum("...nk,...n->...k", hat.X, a_hat * cm.C * (1.0 - cm.M * cm.Dbrev))
    bottom = np.einsum(
        "...nm,...n->...m", hat.Z, b_hat * (cm.C * (EULER + cm.N * cm.Dbrev) - 1.0)
    )
    return np.concatenate([top, bottom], axis=-1)


def upsilon_bar(
    hat: DesignState, tilde: DesignState, cm: CouplingMatrices | None = None
) -> np.ndarray:
    """Closed form of ``Upsilon`` (not symmetric in general)."""
    cm = cm or coupling(hat, tilde)
    C, D, Db, M, N, P = cm.C, cm.D, cm.Dbrev, cm.M, cm.N, cm.P
    a_hat = hat.T / hat.phi
    b_hat = hat.H / hat.phi
    a_til = tilde.T / tilde.phi
    b_til = tilde.H / tilde.phi
    bb = weighted_gram(hat.X, a_hat * C * M * Db * a_til, tilde.X)
    bg = weighted_gram(hat.X, a_hat * C * (1.0 + Db * (M * D - M - C * N)) * b_til, tilde.Z)
    gb = -weighted_gram(hat.Z, b_hat * C * N * Db * a_til, tilde.X)
    gg = weighted_gram(hat.Z, b_hat * C * (EULER + Db * (N + C * P - N * D)) * b_til, tilde.Z)
    top = np.concatenate([bb, bg], axis=-1)
    bottom = np.concatenate([gb, gg], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


@dataclass
class SkovgaardParts:
    qbar: np.ndarray
    upsilon: np.ndarray
    zeta: float
    w: float
    w_star: float
    flags: set = field(default_factory=set)


_FACTORS = ("I_tilde", "I_hat", "J_hat", "J_tilde_psipsi", "Upsilon")


def skovgaard_core(
    w,
    I_hat,
    I_tilde,
    J_hat,
    J_tilde,
    ups,
    qb,
    U_tilde,
    nu_idx,
    clamp: bool = False,
    raise_singular: bool = False,
):
    """Batched ``zeta`` and ``w* = w - 2 log(zeta)``, assembled in log space.

    Returns a dict with ``w_star``, ``zeta`` and boolean flag arrays
    ``small_w``, ``zeta_degenerate``, ``ill_conditioned``.
    """
    w = np.asarray(w, dtype=float)
    p = I_hat.shape[-1]
    nu_idx = list(nu_idx)
    r = len(nu_idx)
    psi = [i for i in range(p) if i not in set(nu_idx)]
    U = np.array(U_tilde, dtype=float)
    U[..., psi] = 0.0

    ix = np.ix_(psi, psi)
    J_pp = J_tilde[(...,) + ix]
    mats = {"I_tilde": I_tilde, "I_hat": I_hat, "J_hat": J_hat, "Upsilon": ups}
    signs = {}
    logdets = {}
    for name, mat in list(mats.items()) + [("J_tilde_psipsi", J_pp)]:
        s, ld = np.linalg.slogdet(mat)
        signs[name], logdets[name] = s, ld
    singular = np.zeros(w.shape, dtype=bool)
    for name in _FACTORS:
        bad = (signs[name] == 0) | ~np.isfinite(logdets[name])
        if raise_singular and np.any(bad):
            raise SingularMatrixError(name)
        singular |= bad

    eye = np.broadcast_to(np.eye(p), I_hat.shape)

    def safe(mat):
        # singular rows are replaced so the batched solves stay well defined
        if singular.any():
            return np.where(singular[..., None, None], eye, mat)
        return mat

    Ih, It, Jh, Y = safe(I_hat), safe(I_tilde), safe(J_hat), safe(ups)
    cond = np.max(np.stack([np.linalg.cond(m) for m in (It, Ih, Jh, Y)]), axis=0)
    ill = ~(cond <= COND_LIMIT)

    Yinv_J = np.linalg.solve(Y, Jh)
    Ihinv_Y = np.linalg.solve(Ih, Y)
    A = It @ Yinv_J @ Ihinv_Y
    sA, ldA = np.linalg.slogdet(A[(...,) + ix])

    v = np.linalg.solve(It, U[..., None])
    v = Y @ v
    v = np.linalg.solve(Jh, v)
    v = Ih @ v
    v = np.linalg.solve(Y, v)[..., 0]
    quad1 = np.einsum("...i,...i->...", U, v)
    quad2 = np.einsum("...i,...i->...", U, np.linalg.solve(Y, qb[..., None])[..., 0])

    small_w = ~(w >= SMALL_W)
    degenerate = (
        singular
        | (signs["I_tilde"] <= 0)
        | (signs["I_hat"] <= 0)
        | (signs["J_tilde_psipsi"] <= 0)
        | (signs["Upsilon"] <= 0)
        | (sA <= 0)
        | ~(quad1 > 0)
        | ~(quad2 > 0)
    ) & ~small_w

    with np.errstate(all="ignore"):
        log_zeta = (
            0.5 * (logdets["I_tilde"] + logdets["I_hat"] + logdets["J_tilde_psipsi"])
            - logdets["Upsilon"]
            - 0.5 * ldA
            + 0.5 * r * np.log(quad1)
            - (0.5 * r - 1.0) * np.log(w)
            - np.log(quad2)
        )
        zeta = np.exp(log_zeta)
        w_star = w - 2.0 * log_zeta
    fallback = small_w | degenerate | ~np.isfinite(w_star)
    degenerate = degenerate | (~np.isfinite(w_star) & ~small_w)
    w_star = np.where(fallback, w, w_star)
    zeta = np.where(fallback, np.nan, zeta)
    if clamp:
        w_star = np.maximum(w_star, 0.0)
    return {
        "w_star": w_star,
        "zeta": zeta,
        "small_w": small_w,
        "zeta_degenerate": degenerate,
        "ill_conditioned": ill & ~small_w,
    }


def adjusted_lr(hat_fit, tilde_fit, hypothesis=None, clamp: bool = False) -> SkovgaardParts:
    """Adjusted likelihood ratio statistic from an unrestricted and a restricted fit.

    Parameters
    ----------
    hat_fit, tilde_fit : FitResult
        Unrestricted and restricted fits of the same model and data.
    hypothesis : Hypothesis, optional
        Defaults to ``tilde_fit.restriction``.
    clamp : bool
        Clamp ``w*`` at zero.

    Raises
    ------
    SingularMatrixError
        If one of the factors of ``zeta`` is singular; the message names it.
    """
    hypothesis = hypothesis or tilde_fit.restriction
    if hypothesis is None:
        raise ValueError("a hypothesis is required")
    if hat_fit.model is not tilde_fit.model:
        raise ValueError("fits must share the same model")
    if hat_fit.data.n != tilde_fit.data.n:
        raise ValueError("fits must use the same data (dimension mismatch)")
    model = hat_fit.model
    nu_idx = hypothesis.indices(model)
    hat = hat_fit.state()
    tilde = tilde_fit.state()
    mmax = hat_fit.max_model
    shift = design_shift(mmax, hat, tilde, hat_fit.theta.flat, tilde_fit.theta.flat)
    cm = coupling(hat, tilde, shift)
    qb = qbar(hat, tilde, cm)
    ups = upsilon_bar(hat, tilde, cm)
    w = loglik_ratio(hat, tilde, shift)
    core = skovgaard_core(
        w,
        hat_fit.I.full,
        tilde_fit.I.full,
        hat_fit.J.full,
        tilde_fit.J.full,
        ups,
        qb,
        tilde_fit.score,
        nu_idx,
        clamp=clamp,
        raise_singular=True,
    )
    flags = {name for name in ("small_w", "zeta_degenerate", "ill_conditioned") if bool(core[name])}
    return SkovgaardParts(
        qbar=qb,
        upsilon=ups,
        zeta=float(core["zeta"]),
        w=float(w),
        w_star=float(core["w_star"]),
        flags=flags,
    )
