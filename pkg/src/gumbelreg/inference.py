"""Likelihood ratio, Wald, score, gradient and adjusted likelihood ratio tests.

``run_tests`` handles one dataset; ``test_batch`` runs the same computation
for a block of simulated responses and is what the Monte Carlo engine calls.
Both share :func:`wald_score_gradient` and
:func:`~gumbelreg.skovgaard.skovgaard_core`, so the two paths cannot drift
apart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import FitError, ModelError
from .estimate import FitResult, Hypothesis, default_init_batch, fit_batch, fit_mle
from .likelihood import expected_info, loglik_ratio, observed_info, score
from .model import ModelSpec, ObservationSet, design_shift, evaluate_state, max_form
from .skovgaard import adjusted_lr, coupling, qbar, skovgaard_core, upsilon_bar
from .specfun import chi2_ppf, chi2_sf

__all__ = [
    "STATISTICS",
    "TestReport",
    "ConfidenceInterval",
    "run_tests",
    "test_batch",
    "wald_score_gradient",
    "confidence_interval",
    "canonical_kind",
]

#: Statistic keys in reporting order.
STATISTICS = ("w", "W", "S_R", "S_T", "w_star")

_ALIASES = {
    "w": "w",
    "lr": "w",
    "W": "W",
    "wald": "W",
    "S_R": "S_R",
    "SR": "S_R",
    "score": "S_R",
    "S_T": "S_T",
    "ST": "S_T",
    "gradient": "S_T",
    "w_star": "w_star",
    "wstar": "w_star",
    "w*": "w_star",
}

CI_MAX_SE = 60.0
CI_MAX_EXPANSIONS = 60
CI_GROWTH = 1.5
CI_TOL = 1e-6


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[kind]
    except KeyError:
        raise ModelError(f"unknown statistic {kind!r}; choose from {sorted(_ALIASES)}") from None


def _inv_block(mat, idx):
    ix = np.ix_(idx, idx)
    return np.linalg.inv(mat)[(...,) + ix]


def wald_score_gradient(I_hat, I_tilde, U_tilde, theta_hat, nu_idx, nu0):
    """Wald, score and gradient statistics (batched over leading axes).

    ``I^{nu nu}`` is the ``(nu, nu)`` block of the inverse information.
    """
    d = theta_hat[..., nu_idx] - nu0
    u = U_tilde[..., nu_idx]
    a_hat = _inv_block(I_hat, nu_idx)
    a_til = _inv_block(I_tilde, nu_idx)
    W = np.einsum("...i,...i->...", d, np.linalg.solve(a_hat, d[..., None])[..., 0])
    S_R = np.einsum("...i,...ij,...j->...", u, a_til, u)
    S_T = np.einsum("...i,...i->...", u, d)
    return W, S_R, S_T


def p_value(stat, r: int):
    """``chi2_sf`` with negative values (and ``-0``) mapped to zero."""
    return chi2_sf(np.maximum(np.asarray(stat, dtype=float), 0.0), r)


@dataclass
class TestReport:
    """All five statistics for one hypothesis and dataset."""

    hypothesis: Hypothesis
    r: int
    w: float
    W: float
    S_R: float
    S_T: float
    w_star: float
    zeta: float
    p_values: dict
    flags: set = field(default_factory=set)
    hat: FitResult | None = None
    tilde: FitResult | None = None

    @property
    def statistics(self) -> dict:
        return {k: getattr(self, k) for k in STATISTICS}

    def to_dict(self) -> dict:
        out = {
            "hypothesis": [[n, v] for n, v in self.hypothesis.constraints],
            "r": self.r,
            "statistics": self.statistics,
            "p_values": dict(self.p_values),
            "zeta": self.zeta,
            "flags": sorted(self.flags),
        }
        if self.hat is not None:
            out["theta_hat"] = self.hat.theta.as_dict()
            out["loglik_hat"] = self.hat.loglik
        if self.tilde is not None:
            out["theta_tilde"] = self.tilde.theta.as_dict()
            out["loglik_tilde"] = self.tilde.loglik
        return out

    def table(self) -> str:
        labels = {"w": "w", "W": "W", "S_R": "S_R", "S_T": "S_T", "w_star": "w*"}
        lines = [f"H0: {self.hypothesis}   (r = {self.r})", f"{'statistic':<10}{'value':>12}{'p-value':>12}"]
        for k in STATISTICS:
            lines.append(f"{labels[k]:<10}{getattr(self, k):>12.4f}{self.p_values[k]:>12.4f}")
        lines.append("flags: " + (", ".join(sorted(self.flags)) if self.flags else "none"))
        return "\n".join(lines)


def run_tests(model: ModelSpec, data: ObservationSet, hypothesis: Hypothesis, clamp: bool = False) -> TestReport:
    """Fit the restricted and unrestricted models and compute all five statistics.

    The unrestricted fit is warm-started from the restricted one.

    Raises
    ------
    FitError
        If either fit fails outright; ``which`` names the fit.
    SingularMatrixError
        If an information matrix or a factor of ``zeta`` is singular.
    """
    nu_idx = hypothesis.indices(model)
    try:
        tilde = fit_mle(model, data, restriction=hypothesis)
    except FitError as exc:
        raise FitError(f"restricted fit failed: {exc}", which="restricted") from exc
    try:
        hat = fit_mle(model, data, init=tilde.theta)
    except FitError as exc:
        raise FitError(f"unrestricted fit failed: {exc}", which="unrestricted") from exc
    return tests_from_fits(hat, tilde, hypothesis, clamp=clamp)


def tests_from_fits(hat: FitResult, tilde: FitResult, hypothesis: Hypothesis, clamp: bool = False) -> TestReport:
    model = hat.model
    nu_idx = hypothesis.indices(model)
    r = len(nu_idx)
    W, S_R, S_T = wald_score_gradient(
        hat.I.full, tilde.I.full, tilde.score, hat.theta.flat, nu_idx, hypothesis.values
    )
    parts = adjusted_lr(hat, tilde, hypothesis, clamp=clamp)
    flags = set(parts.flags)
    if not hat.converged:
        flags.add("nonconvergence_unrestricted")
    if not tilde.converged:
        flags.add("nonconvergence_restricted")
    if S_T < 0:
        flags.add("negative_gradient_statistic")
    if parts.w < 0:
        flags.add("negative_w")
    stats = {"w": parts.w, "W": float(W), "S_R": float(S_R), "S_T": float(S_T), "w_star": parts.w_star}
    return TestReport(
        hypothesis=hypothesis,
        r=r,
        zeta=parts.zeta,
        p_values={k: float(p_value(v, r)) for k, v in stats.items()},
        flags=flags,
        hat=hat,
        tilde=tilde,
        **stats,
    )


def _stats_from_thetas(model, y, covariates, theta_hat, theta_tilde, nu_idx, nu0, clamp):
    """Five statistics for rows whose fits both succeeded (max-family model)."""
    hat = evaluate_state(model, theta_hat, y, covariates, order=2, errors="mask")
    til = evaluate_state(model, theta_tilde, y, covariates, order=2, errors="mask")
    with np.errstate(all="ignore"):
        shift = design_shift(model, hat, til, theta_hat, theta_tilde)
        w = loglik_ratio(hat, til, shift)
        I_h = expected_info(hat).full
        I_t = expected_info(til).full
        J_h = observed_info(hat).full
        J_t = observed_info(til).full
        U_t = score(til).flat
        W, S_R, S_T = wald_score_gradient(I_h, I_t, U_t, theta_hat, nu_idx, nu0)
        cm = coupling(hat, til, shift)
        core = skovgaard_core(
            w, I_h, I_t, J_h, J_t, upsilon_bar(hat, til, cm), qbar(hat, til, cm), U_t, nu_idx, clamp=clamp
        )
    out = {"w": w, "W": W, "S_R": S_R, "S_T": S_T}
    out.update(core)
    return out


def test_batch(
    model: ModelSpec,
    y,
    covariates: Mapping[str, np.ndarray],
    hypothesis: Hypothesis,
    clamp: bool = False,
    chunk: int = 500,
) -> dict:
    """All five statistics for each row of ``y`` (shape ``(B, n)``).

    Returns a dict of arrays keyed by :data:`STATISTICS` plus ``zeta``,
    ``converged`` and the numerics flags. Rows whose fits failed carry NaN
    statistics and ``converged=False``.
    """
    mmax, ym = max_form(model, np.atleast_2d(np.asarray(y, dtype=float)))
    nu_idx = hypothesis.indices(model)
    nu0 = hypothesis.values
    B = ym.shape[0]
    keys = STATISTICS + ("zeta",)
    out = {k: np.full(B, np.nan) for k in keys}
    for k in ("converged", "small_w", "zeta_degenerate", "ill_conditioned"):
        out[k] = np.zeros(B, dtype=bool)
    out["theta_hat"] = np.full((B, model.p), np.nan)
    for start in range(0, B, chunk):
        sl = slice(start, min(B, start + chunk))
        rows = np.arange(sl.start, sl.stop)
        cov = {c: (v if np.ndim(v) == 1 else v[sl]) for c, v in covariates.items()}
        yb = ym[sl]
        x0 = default_init_batch(mmax, yb, cov)
        til = fit_batch(mmax, yb, cov, x0, nu_idx, nu0)
        hat = fit_batch(mmax, yb, cov, til.theta)
        ok = til.converged & hat.converged
        out["converged"][rows] = ok
        out["theta_hat"][rows] = hat.theta
        if not ok.any():
            continue
        sel = np.flatnonzero(ok)
        cov_ok = {c: (v if np.ndim(v) == 1 else v[sel]) for c, v in cov.items()}
        res = _stats_from_thetas(mmax, yb[sel], cov_ok, hat.theta[sel], til.theta[sel], nu_idx, nu0, clamp)
        for k in keys + ("small_w", "zeta_degenerate", "ill_conditioned"):
            out[k][rows[sel]] = res[k]
    return out


# --------------------------------------------------------------------------
# Confidence intervals by test inversion


@dataclass
class ConfidenceInterval:
    parameter: str
    level: float
    kind: str
    estimate: float
    lower: float
    upper: float
    evaluations: int
    flags: set = field(default_factory=set)

    @property
    def lower_open(self) -> bool:
        return "lower_open" in self.flags

    @property
    def upper_open(self) -> bool:
        return "upper_open" in self.flags

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "level": self.level,
            "kind": self.kind,
            "estimate": self.estimate,
            "lower": self.lower,
            "upper": self.upper,
            "evaluations": self.evaluations,
            "flags": sorted(self.flags),
        }


class _Profile:
    """Statistic as a function of the pinned value of one parameter."""

    def __init__(self, model, data, hat, name, kind, clamp):
        self.model, self.data, self.hat = model, data, hat
        self.name, self.kind, self.clamp = name, kind, clamp
        self.j = model.index(name)
        self.estimate = float(hat.theta.flat[self.j])
        self.var = float(np.linalg.inv(hat.I.full)[self.j, self.j])
        self.evaluations = 0
        self.failures = 0
        self._starts = [(self.estimate, hat.theta)]

    def __call__(self, nu0: float) -> float:
        self.evaluations += 1
        if self.kind == "W":
            return (self.estimate - nu0) ** 2 / self.var
        hyp = Hypothesis(((self.name, float(nu0)),))
        start = min(self._starts, key=lambda s: abs(s[0] - nu0))[1]
        try:
            tilde = fit_mle(self.model, self.data, init=start, restriction=hyp)
            if not tilde.converged:
                raise FitError("restricted fit did not converge")
            rep = tests_from_fits(self.hat, tilde, hyp, clamp=self.clamp)
        except (FitError, ArithmeticError, ValueError):
            self.failures += 1
            return math.nan
        self._starts.append((nu0, tilde.theta))
        return float(getattr(rep, self.kind))


def confidence_interval(
    model: ModelSpec,
    data: ObservationSet,
    parameter: str,
    level: float = 0.95,
    kind: str = "w",
    clamp: bool = False,
    hat: FitResult | None = None,
) -> ConfidenceInterval:
    """Invert one of the five tests for a scalar parameter.

    Each side is bracketed by stepping outward from the estimate in
    geometrically growing multiples of the asymptotic standard error (capped
    at 60 standard errors), then refined by bisection to ``1e-6`` standard
    errors. Values where the restricted fit fails are treated as outside the
    set. A side that cannot be bracketed is reported as open (infinite).
    """
    if not 0.5 < level < 1.0:
        raise ValueError("level must lie in (0.5, 1)")
    kind = canonical_kind(kind)
    hat = hat or fit_mle(model, data)
    prof = _Profile(model, data, hat, parameter, kind, clamp)
    se = math.sqrt(prof.var)
    crit = chi2_ppf(level, 1)
    flags = set()
    ends = []
    for side, label in ((-1.0, "lower"), (1.0, "upper")):
        inner, outer = 0.0, None
        step = 1.0
        for _ in range(CI_MAX_EXPANSIONS):
            d = min(step, CI_MAX_SE)
            val = prof(prof.estimate + side * d * se)
            if not val < crit:
                outer = d
                break
            inner = d
            if d >= CI_MAX_SE:
                break
            step *= CI_GROWTH
        if outer is None:
            flags.add(f"{label}_open")
            ends.append(side * math.inf)
            continue
        while (outer - inner) > CI_TOL:
            mid = 0.5 * (inner + outer)
            val = prof(prof.estimate + side * mid * se)
            if val < crit:
                inner = mid
            else:
                outer = mid
        ends.append(prof.estimate + side * 0.5 * (inner + outer) * se)
    if prof.failures:
        flags.add("fit_failure")
    return ConfidenceInterval(
        parameter=parameter,
        level=level,
        kind=kind,
        estimate=prof.estimate,
        lower=ends[0],
        upper=ends[1],
        evaluations=prof.evaluations,
        flags=flags,
    )
