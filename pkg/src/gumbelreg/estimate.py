"""Unrestricted and restricted maximum likelihood fitting.

The optimiser is a quasi-Newton BFGS iteration on the free coordinates,
vectorised over a batch of independent problems (one row per dataset) so that
Monte Carlo studies fit thousands of samples per call. Each row keeps its own
inverse-Hessian approximation and runs its own backtracking Armijo line
search; steps that leave the parameter domain count as failed steps. The
initial inverse Hessian is the inverse expected information, so the first
step is a Fisher-scoring step. Converged rows are finished with a few
safeguarded Newton steps on the analytic observed information, which makes
the solution accurate to rounding error.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import FitError, ModelError
from .likelihood import InfoMatrix, expected_info, loglik, observed_info, score
from .model import (
    DISPERSION_LINKS,
    LOCATION_LINKS,
    ModelSpec,
    ObservationSet,
    Theta,
    evaluate_state,
    max_form,
    rank_warnings,
)
from .specfun import EULER

__all__ = [
    "Hypothesis",
    "FitResult",
    "BatchFit",
    "fit_mle",
    "fit_batch",
    "default_init",
    "default_init_batch",
]

ARMIJO_C1 = 1e-4
SHRINK = 0.5
MAX_HALVINGS = 60
MAX_ITER = 500
GTOL = 1e-8
FTOL = 1e-12
POLISH_STEPS = 6
N_RESTARTS = 3


@dataclass(frozen=True)
class Hypothesis:
    """Null hypothesis pinning named parameters at fixed values."""

    constraints: tuple

    def __post_init__(self):
        names = [c[0] for c in self.constraints]
        if len(set(names)) != len(names):
            raise ModelError("hypothesis names must be distinct")
        if not names:
            raise ModelError("hypothesis needs at least one constraint")

    @classmethod
    def parse(cls, text: str | Sequence[str]) -> "Hypothesis":
        """Parse ``"b1=0"``, ``"b2=0,b3=0"`` or a list of ``name=value`` items."""
        items = [text] if isinstance(text, str) else list(text)
        pairs = []
        for item in items:
            for part in re.split(r"[,;]", item):
                part = part.strip()
                if not part:
                    continue
                if "=" not in part:
                    raise ModelError(f"hypothesis item {part!r} is not of the form name=value")
                name, value = part.split("=", 1)
                try:
                    pairs.append((name.strip(), float(value)))
                except ValueError:
                    raise ModelError(f"invalid value in hypothesis item {part!r}") from None
        return cls(tuple(pairs))

    @classmethod
    def of(cls, **values) -> "Hypothesis":
        return cls(tuple((k, float(v)) for k, v in values.items()))

    @property
    def r(self) -> int:
        return len(self.constraints)

    @property
    def names(self) -> tuple:
        return tuple(c[0] for c in self.constraints)

    @property
    def values(self) -> np.ndarray:
        return np.array([c[1] for c in self.constraints], dtype=float)

    def indices(self, model: ModelSpec) -> list[int]:
        idx = [model.index(n) for n in self.names]
        if not 1 <= len(idx) < model.p:
            raise ModelError("hypothesis must fix at least one and fewer than all parameters")
        return idx

    def __str__(self):
        return ", ".join(f"{n}={v:g}" for n, v in self.constraints)


@dataclass
class FitResult:
    """Outcome of a (possibly restricted) maximum likelihood fit."""

    theta: Theta
    loglik: float
    score: np.ndarray
    score_norm: float
    J: InfoMatrix
    I: InfoMatrix
    converged: bool
    iterations: int
    model: ModelSpec
    data: ObservationSet
    rank_warnings: list = field(default_factory=list)
    restriction: Hypothesis | None = None

    @property
    def max_model(self) -> ModelSpec:
        """The model in max form (the model itself for the max family)."""
        return max_form(self.model, None)[0]

    def state(self, order: int = 2):
        """Design quantities at the solution (in max form)."""
        mmax, y = max_form(self.model, self.data.response)
        return evaluate_state(mmax, self.theta.flat, y, self.data.covariates, order=order)

    def standard_errors(self) -> np.ndarray:
        """Asymptotic standard errors from the inverse expected information."""
        return np.sqrt(np.diag(np.linalg.inv(self.I.full)))


@dataclass
class BatchFit:
    theta: np.ndarray
    loglik: np.ndarray
    score: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    loglik_path_ok: np.ndarray


def _rows(cov, rows):
    return {c: (v if np.ndim(v) == 1 else v[rows]) for c, v in cov.items()}


class _Problem:
    """Objective over the free coordinates of a batch of datasets."""

    def __init__(self, model, y, covariates, base, free):
        self.model = model
        self.y = y
        self.cov = covariates
        self.base = base
        self.free = free

    def full(self, rows, x):
        th = self.base[rows].copy()
        th[:, self.free] = x
        return th

    def state(self, rows, x, order):
        return evaluate_state(
            self.model, self.full(rows, x), self.y[rows], _rows(self.cov, rows), order=order, errors="mask"
        )

    def value_grad(self, rows, x):
        st = self.state(rows, x, 1)
        with np.errstate(all="ignore"):
            ll = loglik(st)
            g = score(st).flat[:, self.free]
        bad = st.invalid | ~np.isfinite(ll) | ~np.all(np.isfinite(g), axis=-1)
        ll = np.where(bad, -np.inf, ll)
        return ll, g

    def info(self, rows, x, kind):
        st = self.state(rows, x, 2 if kind == "observed" else 1)
        with np.errstate(all="ignore"):
            if kind == "observed":
                full = observed_info(st).full
                ll = loglik(st)
                g = score(st).flat[:, self.free]
            else:
                full = expected_info(st).full
                ll = g = None
        sub = full[:, self.free][:, :, self.free]
        return sub, ll, g, st.invalid

    def rounding(self, rows, x):
        """Rough size of the rounding error in ``l``.

        Forming ``z = (y - mu)/phi`` loses about ``eps*(|y| + |mu|)/phi`` per
        observation; ``l`` responds to ``z`` with slope ``1 - exp(-z)``.
        """
        st = self.state(rows, x, 1)
        with np.errstate(all="ignore"):
            dz = (np.abs(st.y) + np.abs(st.mu)) / st.phi
            per = dz * (1.0 + st.zbrev) + np.abs(np.log(st.phi)) + np.abs(st.z) + st.zbrev
            out = np.finfo(float).eps * np.sum(per, axis=-1)
        return np.where(np.isfinite(out), out, 0.0)


def _safe_inverse(mats):
    """Inverse of each positive definite matrix; other rows get a scaled identity."""
    p = mats.shape[-1]
    out = np.empty_like(mats)
    with np.errstate(all="ignore"):
        ok = np.all(np.isfinite(mats), axis=(-1, -2))
        ev = np.full(mats.shape[:-1], -1.0)
        if ok.any():
            ev[ok] = np.linalg.eigvalsh(mats[ok])
        pd = ok & (ev[..., 0] > 1e-14 * np.maximum(np.abs(ev[..., -1]), 1e-300))
        if pd.any():
            out[pd] = np.linalg.inv(mats[pd])
        if (~pd).any():
            diag = np.abs(np.diagonal(mats[~pd], axis1=-2, axis2=-1))
            diag = np.where(np.isfinite(diag) & (diag > 0), diag, 1.0)
            out[~pd] = np.eye(p) / diag.max(axis=-1)[:, None, None]
    return out, pd


def _converged(ll, g, gtol):
    return np.max(np.abs(g), axis=-1) <= gtol * np.maximum(1.0, np.abs(ll))


def _bfgs(prob, x0, gtol, ftol, max_iter):
    B, q = x0.shape
    rows_all = np.arange(B)
    x = x0.copy()
    ll, g = prob.value_grad(rows_all, x)
    iters = np.zeros(B, dtype=int)
    monotone = np.ones(B, dtype=bool)
    failed = ~np.isfinite(ll)
    done = failed | _converged(ll, g, gtol)
    conv = ~failed & done
    I0, _, _, _ = prob.info(rows_all, x, "expected")
    H0, _ = _safe_inverse(I0)
    H = H0.copy()

    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        ga = g[act]
        d = np.einsum("bij,bj->bi", H[act], ga)
        slope = np.einsum("bi,bi->b", ga, d)
        reset = ~(slope > 0)
        if reset.any():
            H[act[reset]] = H0[act[reset]]
            d[reset] = np.einsum("bij,bj->bi", H0[act[reset]], ga[reset])
            slope[reset] = np.einsum("bi,bi->b", ga[reset], d[reset])
        step = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        new_ll = np.full(act.size, -np.inf)
        new_g = np.zeros_like(ga)
        pending = slope > 0
        for _ls in range(MAX_HALVINGS):
            pi = np.flatnonzero(pending)
            if pi.size == 0:
                break
            xt = x[act[pi]] + step[pi, None] * d[pi]
            lt, gt = prob.value_grad(act[pi], xt)
            ok = np.isfinite(lt) & (lt >= ll[act[pi]] + ARMIJO_C1 * step[pi] * slope[pi])
            okp = pi[ok]
            accepted[okp] = True
            new_ll[okp] = lt[ok]
            new_g[okp] = gt[ok]
            pending[okp] = False
            step[pi[~ok]] *= SHRINK
        iters[act] += 1

        stalled = act[~accepted]
        done[stalled] = True
        conv[stalled] = _converged(ll[stalled], g[stalled], 100 * gtol)

        ai = np.flatnonzero(accepted)
        if ai.size == 0:
            continue
        rows = act[ai]
        s = step[ai, None] * d[ai]
        yv = -(new_g[ai] - g[rows])
        sy = np.einsum("bi,bi->b", s, yv)
        Hr = H[rows]
        upd = sy > 1e-12 * np.linalg.norm(s, axis=-1) * np.linalg.norm(yv, axis=-1)
        if upd.any():
            rho = 1.0 / sy[upd]
            Hu = Hr[upd]
            su, yu = s[upd], yv[upd]
            Hy = np.einsum("bij,bj->bi", Hu, yu)
            yHy = np.einsum("bi,bi->b", yu, Hy)
            Hu = (
                Hu
                - rho[:, None, None] * (su[:, :, None] * Hy[:, None, :] + Hy[:, :, None] * su[:, None, :])
                + (rho**2 * yHy + rho)[:, None, None] * su[:, :, None] * su[:, None, :]
            )
            Hr[upd] = Hu
            H[rows] = Hr
        old = ll[rows]
        monotone[rows] &= new_ll[ai] >= old
        x[rows] = x[rows] + s
        ll[rows] = new_ll[ai]
        g[rows] = new_g[ai]
        gconv = _converged(ll[rows], g[rows], gtol)
        fconv = np.abs(ll[rows] - old) <= ftol * np.maximum(1.0, np.abs(old))
        fin = gconv | fconv
        done[rows[fin]] = True
        conv[rows[fin]] = True

    return x, ll, g, conv, failed, iters, monotone


def _polish(prob, x, ll, g, rows, steps):
    """Safeguarded Newton steps on the observed information.

    A step is kept if it does not decrease ``l``, or if ``l`` is unchanged to
    rounding and the gradient shrinks. The rounding allowance comes from
    :meth:`_Problem.rounding`, which matters when ``|mu|/phi`` is large.
    """
    for _ in range(steps):
        if rows.size == 0:
            break
        J, _, _, _ = prob.info(rows, x[rows], "observed")
        with np.errstate(all="ignore"):
            ok = np.all(np.isfinite(J), axis=(-1, -2))
            ev = np.full(J.shape[:-1], -1.0)
            if ok.any():
                ev[ok] = np.linalg.eigvalsh(J[ok])
        # skip numerically singular systems (e.g. collinear designs)
        pd = ok & (ev[:, 0] > 1e-12 * np.abs(ev[:, -1]))
        rows = rows[pd]
        if rows.size == 0:
            break
        d = np.linalg.solve(J[pd], g[rows][..., None])[..., 0]
        scale = np.maximum(1.0, np.abs(ll[rows]))
        tol = np.maximum(64 * np.finfo(float).eps * scale, 4 * prob.rounding(rows, x[rows]))
        improved = np.zeros(rows.size, dtype=bool)
        t = np.ones(rows.size)
        pending = np.ones(rows.size, dtype=bool)
        for _h in range(4):
            pi = np.flatnonzero(pending)
            if pi.size == 0:
                break
            xt = x[rows[pi]] + t[pi, None] * d[pi]
            lt, gt = prob.value_grad(rows[pi], xt)
            l0 = ll[rows[pi]]
            # near the optimum the gain is below rounding; then a smaller gradient decides
            flat = lt >= l0 - tol[pi]
            shrinks = np.max(np.abs(gt), axis=-1) < np.max(np.abs(g[rows[pi]]), axis=-1)
            ok_step = np.isfinite(lt) & ((lt >= l0) | (flat & shrinks))
            acc = pi[ok_step]
            r_acc = rows[acc]
            moved = np.max(np.abs(xt[ok_step] - x[r_acc]), axis=-1) > 0
            x[r_acc] = xt[ok_step]
            ll[r_acc] = lt[ok_step]
            g[r_acc] = gt[ok_step]
            improved[acc] = moved
            pending[acc] = False
            t[pi[~ok_step]] *= 0.5
        tiny = np.max(np.abs(d), axis=-1) <= 1e-15 * np.maximum(1.0, np.max(np.abs(x[rows]), axis=-1))
        rows = rows[improved & ~tiny]
    return x, ll, g


def _jitter(x, attempt):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        seed = zlib.crc32(np.ascontiguousarray(row).tobytes()) + 7919 * attempt
        rng = np.random.default_rng(seed)
        out[i] = row + 0.1 * (np.abs(row) + 1.0) * rng.standard_normal(row.shape)
    return out


def fit_batch(
    model: ModelSpec,
    y,
    covariates: Mapping[str, np.ndarray],
    init,
    fixed_idx: Sequence[int] = (),
    fixed_values=None,
    gtol: float = GTOL,
    ftol: float = FTOL,
    max_iter: int = MAX_ITER,
    restarts: int = N_RESTARTS,
) -> BatchFit:
    """Fit a batch of independent datasets with a max-family model.

    Parameters
    ----------
    model : ModelSpec
        Max-family model (apply :func:`~gumbelreg.model.to_max_form` first).
    y : array, shape (B, n)
    covariates : mapping of arrays of shape (n,) or (B, n)
    init : array, shape (B, p)
        Starting values; the fixed coordinates are overwritten.
    fixed_idx, fixed_values
        Pinned coordinates and their values (shape ``(r,)`` or ``(B, r)``).
    """
    if model.family != "max":
        raise ModelError("fit_batch expects a max-family model")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    B = y.shape[0]
    base = np.array(np.broadcast_to(np.asarray(init, dtype=float), (B, model.p)))
    fixed_idx = list(fixed_idx)
    if fixed_idx:
        base[:, fixed_idx] = np.broadcast_to(np.asarray(fixed_values, dtype=float), (B, len(fixed_idx)))
    free = [i for i in range(model.p) if i not in set(fixed_idx)]
    prob = _Problem(model, y, covariates, base, free)

    x, ll, g, conv, failed, iters, monotone = _bfgs(prob, base[:, free].copy(), gtol, ftol, max_iter)

    for attempt in range(1, restarts + 1):
        bad = np.flatnonzero(~conv)
        if bad.size == 0:
            break
        sub = _Problem(model, y[bad], _rows(covariates, bad), base[bad], free)
        x0 = _jitter(base[bad][:, free], attempt)
        xs, lls, gs, cs, fs, its, mono = _bfgs(sub, x0, gtol, ftol, max_iter)
        better = cs & (~np.isfinite(ll[bad]) | (lls >= ll[bad]) | ~conv[bad])
        take = bad[better]
        x[take], ll[take], g[take] = xs[better], lls[better], gs[better]
        conv[take] = True
        iters[bad] += its
        monotone[take] = mono[better]

    ok = np.flatnonzero(np.isfinite(ll))
    x, ll, g = _polish(prob, x, ll, g, ok, POLISH_STEPS)
    conv = conv | (np.isfinite(ll) & _converged(ll, g, gtol))
    theta = base.copy()
    theta[:, free] = x
    full_g = np.zeros((B, model.p))
    full_g[:, free] = g
    st = evaluate_state(model, theta, y, covariates, order=1, errors="mask")
    with np.errstate(all="ignore"):
        full_g = score(st).flat
    return BatchFit(theta, ll, full_g, conv & np.isfinite(ll), iters, monotone)


# --------------------------------------------------------------------------
# Starting values


def _link_apply(name, values):
    if name == "log":
        return np.log(np.maximum(values, 1e-300))
    return values


def _ls_block(expr, covariates, n, target, batch_shape):
    """Least squares for the linear parameters of ``expr``; others stay at 0.

    Returns ``(coefficients, fitted)``; ``fitted`` is ``None`` when the design
    is rank deficient and the intercept-only fallback was used.
    """
    p = len(expr.params)
    lin = list(expr.linear_params())
    out = np.zeros(batch_shape + (p,))
    per_row = any(np.ndim(v) > 1 for v in covariates.values())
    zeros = np.zeros(batch_shape + (p,) if per_row else (1, p))
    at0 = expr.evaluate(zeros, covariates, n=n, order=1, errors="mask")
    if at0.invalid is not None and at0.invalid.any():
        return out, None
    offset, jac = at0.value, at0.jac
    rhs = target - offset
    if not lin:
        return out, None
    A = np.broadcast_to(jac[..., lin], batch_shape + (n, len(lin)))
    if np.all(np.linalg.matrix_rank(A) == len(lin)):
        coef = (np.linalg.pinv(A) @ rhs[..., None])[..., 0]
        out[..., lin] = coef
        return out, offset + np.einsum("...nq,...q->...n", A, coef)
    const_cols = [j for j in lin if np.all(jac[..., j] == 1.0)]
    if const_cols:
        out[..., const_cols[0]] = (rhs.mean(axis=-1))
    return out, None


def default_init_batch(model: ModelSpec, y, covariates) -> np.ndarray:
    """Deterministic starting values for a batch of datasets (max-family model).

    Linear location parameters come from least squares of ``g(y)`` on the
    location Jacobian evaluated at zero (parameters in nonlinear positions
    start at zero); the location is then shifted by ``-EULER*phi0`` where
    ``phi0 = sd(residual) * sqrt(6) / pi`` is the moment estimate of the
    dispersion. Linear dispersion parameters are chosen so that
    ``h^{-1}(delta)`` matches ``phi0``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    B, n = y.shape
    bshape = (B,)
    loc, disp = model.loc_expr, model.disp_expr
    g = model.loc_link
    beta, fitted = _ls_block(loc, covariates, n, _link_apply(g, y), bshape)
    if fitted is not None:
        resid = y - LOCATION_LINKS[g].inverse(fitted)
    else:
        resid = y - y.mean(axis=-1, keepdims=True)
    sd = resid.std(axis=-1, ddof=1) if n > 1 else np.ones(B)
    sd = np.where(np.isfinite(sd) & (sd > 0), sd, np.maximum(y.std(axis=-1), 1.0))
    phi0 = sd * np.sqrt(6.0) / np.pi
    target = _link_apply(g, y - EULER * phi0[:, None])
    beta, _ = _ls_block(loc, covariates, n, target, bshape)
    dtarget = np.broadcast_to(_link_apply(model.disp_link, phi0)[:, None], (B, n))
    gamma, _ = _ls_block(disp, covariates, n, dtarget, bshape)
    return np.concatenate([beta, gamma], axis=-1)


def default_init(model: ModelSpec, data: ObservationSet) -> Theta:
    """Deterministic starting values for one dataset."""
    mmax, y = max_form(model, data.response)
    flat = default_init_batch(mmax, y[None, :], data.covariates)[0]
    return Theta.from_flat(model, flat)


# --------------------------------------------------------------------------
# Single-dataset interface


def _check_data(model, data):
    if not isinstance(data, ObservationSet):
        raise TypeError("data must be an ObservationSet")
    missing = [c for c in model.covariates if c not in data.covariates]
    if missing:
        raise ModelError(f"data lacks covariate column(s): {missing}")
    if np.ptp(data.response) == 0.0:
        raise FitError("degenerate data: response has zero spread")


def fit_mle(
    model: ModelSpec,
    data: ObservationSet,
    init=None,
    restriction: Hypothesis | None = None,
) -> FitResult:
    """Maximum likelihood fit, optionally with parameters pinned by ``restriction``.

    Non-convergence does not raise: the best point is returned with
    ``converged=False``.
    """
    _check_data(model, data)
    fixed_idx = restriction.indices(model) if restriction is not None else []
    n_free = model.p - len(fixed_idx)
    if data.n <= n_free:
        raise FitError(f"need more observations ({data.n}) than free parameters ({n_free})")
    mmax, y = max_form(model, data.response)
    if init is None:
        x0 = default_init_batch(mmax, y[None, :], data.covariates)
    elif isinstance(init, Theta):
        x0 = init.flat[None, :]
    elif isinstance(init, Mapping):
        start = default_init_batch(mmax, y[None, :], data.covariates)[0]
        for name, v in init.items():
            start[model.index(name)] = float(v)
        x0 = start[None, :]
    else:
        x0 = np.asarray(init, dtype=float).reshape(1, model.p)
    fixed_values = restriction.values if restriction is not None else None
    bf = fit_batch(mmax, y[None, :], data.covariates, x0, fixed_idx, fixed_values)
    theta_flat = bf.theta[0]
    if not np.isfinite(bf.loglik[0]):
        raise FitError("fit failed: no feasible starting point")
    st = evaluate_state(mmax, theta_flat, y, data.covariates, order=2)
    U = score(st).flat
    free = [i for i in range(model.p) if i not in set(fixed_idx)]
    return FitResult(
        theta=Theta.from_flat(model, theta_flat),
        loglik=float(loglik(st)),
        score=U,
        score_norm=float(np.max(np.abs(U[free]))),
        J=observed_info(st),
        I=expected_info(st),
        converged=bool(bf.converged[0]),
        iterations=int(bf.iterations[0]),
        model=model,
        data=data,
        rank_warnings=rank_warnings(st),
        restriction=restriction,
    )
