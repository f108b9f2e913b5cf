"""Model specification, design quantities and response sampling.

Everything here accepts parameter arrays with leading batch axes, so the same
code path serves a single fit and a block of Monte Carlo replications.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ModelError, ObservationDomainError, DataError
from .formula import Node, PredictorExpr, parse_predictor, scan_identifiers

__all__ = [
    "Link",
    "LOCATION_LINKS",
    "DISPERSION_LINKS",
    "ModelSpec",
    "Theta",
    "ObservationSet",
    "DesignState",
    "design_state",
    "evaluate_state",
    "location_dispersion",
    "to_max_form",
    "sample_response",
    "open_uniforms",
    "rank_warnings",
    "DesignShift",
    "design_shift",
]


@dataclass(frozen=True)
class Link:
    """Link ``g`` with inverse and the first two derivatives as functions of the mean."""

    name: str
    inverse: callable
    d1: callable  # g'(mu)
    d2: callable  # g''(mu)
    to_node: callable = None  # builds g^{-1}(eta) as a formula node


def _identity_node(node):
    return node


def _exp_node(node):
    return Node("exp", (node,))


_IDENTITY = Link(
    "identity",
    inverse=lambda eta: eta,
    d1=lambda mu: np.ones_like(mu),
    d2=lambda mu: np.zeros_like(mu),
    to_node=_identity_node,
)
_LOG = Link(
    "log",
    inverse=np.exp,
    d1=lambda mu: 1.0 / mu,
    d2=lambda mu: -1.0 / (mu * mu),
    to_node=_exp_node,
)

LOCATION_LINKS = {"identity": _IDENTITY, "log": _LOG}
DISPERSION_LINKS = {"log": _LOG, "identity": _IDENTITY}
FAMILIES = ("max", "min")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Extreme-value regression model with location and dispersion predictors.

    Parameters
    ----------
    loc_expr, disp_expr : PredictorExpr
        Predictors ``eta(x, beta)`` and ``delta(z, gamma)``.
    family : {"max", "min"}
    loc_link : {"identity", "log"}
    disp_link : {"log", "identity"}
    """

    loc_expr: PredictorExpr
    disp_expr: PredictorExpr
    family: str = "max"
    loc_link: str = "identity"
    disp_link: str = "log"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.loc_link not in LOCATION_LINKS:
            raise ModelError(f"unsupported location link {self.loc_link!r}")
        if self.disp_link not in DISPERSION_LINKS:
            raise ModelError(f"unsupported dispersion link {self.disp_link!r}")
        if not self.loc_expr.params or not self.disp_expr.params:
            raise ModelError("both predictors need at least one parameter")
        shared = set(self.loc_expr.params) & set(self.disp_expr.params)
        if shared:
            raise ModelError(f"parameter names shared by both predictors: {sorted(shared)}")

    @classmethod
    def from_formulas(
        cls,
        location: str,
        dispersion: str,
        loc_params: Sequence[str],
        disp_params: Sequence[str],
        covariates: Sequence[str] | None = None,
        family: str = "max",
        loc_link: str = "identity",
        disp_link: str = "log",
    ) -> "ModelSpec":
        """Build a model from formula strings.

        When ``covariates`` is omitted, every identifier that is not a
        parameter is taken to be a covariate.
        """
        params = set(loc_params) | set(disp_params)
        if covariates is None:
            names = scan_identifiers(location) + scan_identifiers(dispersion)
            covariates = [c for c in dict.fromkeys(names) if c not in params]
        loc = parse_predictor(location, loc_params, covariates)
        disp = parse_predictor(dispersion, disp_params, covariates)
        return cls(loc, disp, family=family, loc_link=loc_link, disp_link=disp_link)

    @property
    def k(self) -> int:
        return len(self.loc_expr.params)

    @property
    def m(self) -> int:
        return len(self.disp_expr.params)

    @property
    def p(self) -> int:
        return self.k + self.m

    @property
    def beta_names(self) -> tuple:
        return self.loc_expr.params

    @property
    def gamma_names(self) -> tuple:
        return self.disp_expr.params

    @property
    def param_names(self) -> tuple:
        return self.beta_names + self.gamma_names

    @property
    def covariates(self) -> tuple:
        return tuple(dict.fromkeys(self.loc_expr.covariates + self.disp_expr.covariates))

    def index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise ModelError(
                f"unknown parameter {name!r}; parameters are {list(self.param_names)}"
            ) from None

    def describe(self) -> dict:
        return {
            "family": self.family,
            "location": {
                "formula": self.loc_expr.text,
                "link": self.loc_link,
                "params": list(self.beta_names),
            },
            "dispersion": {
                "formula": self.disp_expr.text,
                "link": self.disp_link,
                "params": list(self.gamma_names),
            },
        }


@dataclass(frozen=True)
class Theta:
    """Parameter vector split into location (beta) and dispersion (gamma) blocks.

    The flat layout is always ``(beta_1..beta_k, gamma_1..gamma_m)``.
    """

    beta: np.ndarray
    gamma: np.ndarray
    beta_names: tuple
    gamma_names: tuple

    @classmethod
    def from_flat(cls, model: ModelSpec, flat) -> "Theta":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (model.p,):
            raise ValueError(f"expected {model.p} parameter values, got shape {flat.shape}")
        return cls(flat[: model.k].copy(), flat[model.k :].copy(), model.beta_names, model.gamma_names)

    @classmethod
    def from_dict(cls, model: ModelSpec, values: Mapping[str, float]) -> "Theta":
        unknown = set(values) - set(model.param_names)
        if unknown:
            raise ModelError(f"unknown parameter(s): {sorted(unknown)}")
        missing = [n for n in model.param_names if n not in values]
        if missing:
            raise ModelError(f"missing value(s) for parameter(s): {missing}")
        return cls.from_flat(model, [values[n] for n in model.param_names])

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma])

    @property
    def names(self) -> tuple:
        return tuple(self.beta_names) + tuple(self.gamma_names)

    def locate(self, i: int) -> tuple[str, str]:
        """Map a flat position to ``(block, name)``."""
        k = len(self.beta_names)
        if i < k:
            return "beta", self.beta_names[i]
        return "gamma", self.gamma_names[i - k]

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.flat.tolist()))


def _flat(model, theta):
    if isinstance(theta, Theta):
        return theta.flat
    if isinstance(theta, Mapping):
        return Theta.from_dict(model, theta).flat
    return np.asarray(theta, dtype=float)


@dataclass
class ObservationSet:
    """Response column plus named covariate columns, all of length ``n``."""

    response: np.ndarray
    covariates: dict = field(default_factory=dict)
    response_name: str = "y"

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=float)
        if self.response.ndim != 1:
            raise DataError("response must be one-dimensional")
        n = self.response.shape[0]
        cols = {}
        for name, col in self.covariates.items():
            col = np.asarray(col, dtype=float)
            if col.shape != (n,):
                raise DataError(f"covariate {name!r} has shape {col.shape}, expected ({n},)")
            if not np.all(np.isfinite(col)):
                raise DataError(f"covariate {name!r} contains non-finite values")
            cols[name] = col
        if self.response_name in cols:
            raise DataError(f"response {self.response_name!r} also listed as covariate")
        if not np.all(np.isfinite(self.response)):
            raise DataError("response contains non-finite values")
        self.covariates = cols

    @property
    def n(self) -> int:
        return self.response.shape[0]

    def with_response(self, y) -> "ObservationSet":
        return ObservationSet(np.asarray(y, dtype=float), self.covariates, self.response_name)


@dataclass
class DesignState:
    """Per-observation quantities of a max-family model at one parameter value.

    Vectors have shape ``(..., n)``; ``X`` is ``(..., n, k)``, ``Z`` is
    ``(..., n, m)``, ``Xdot`` and ``Zdot`` are ``(..., n, k, k)`` and
    ``(..., n, m, m)``. Diagonal matrices are stored as their diagonals:
    ``T = 1/g'(mu)``, ``H = 1/h'(phi)``, ``S = g''(mu)``, ``Q = h''(phi)``.
    """

    y: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    z: np.ndarray
    zbrev: np.ndarray
    T: np.ndarray
    H: np.ndarray
    S: np.ndarray
    Q: np.ndarray
    X: np.ndarray | None = None
    Z: np.ndarray | None = None
    Xdot: np.ndarray | None = None
    Zdot: np.ndarray | None = None
    invalid: np.ndarray | None = None

    @property
    def Phi(self) -> np.ndarray:
        return self.phi

    @property
    def n(self) -> int:
        return self.y.shape[-1]

    @property
    def k(self) -> int:
        return self.X.shape[-1]

    @property
    def m(self) -> int:
        return self.Z.shape[-1]


def location_dispersion(model: ModelSpec, theta, covariates, n: int, errors="raise"):
    """``(mu, phi, invalid)`` for any family, without derivatives."""
    theta = _flat(model, theta)
    k = model.k
    loc = model.loc_expr.evaluate(theta[..., :k], covariates, n=n, order=0, errors=errors)
    disp = model.disp_expr.evaluate(theta[..., k:], covariates, n=n, order=0, errors=errors)
    with np.errstate(all="ignore"):
        mu = LOCATION_LINKS[model.loc_link].inverse(loc.value)
        phi = DISPERSION_LINKS[model.disp_link].inverse(disp.value)
    invalid = _check_phi(phi, errors)
    if errors == "mask":
        invalid = invalid | loc.invalid | disp.invalid | ~np.all(np.isfinite(mu), axis=-1)
    return mu, phi, invalid


def _check_phi(phi, errors):
    bad = ~(phi > 0.0) | ~np.isfinite(phi)
    if errors == "raise":
        if bad.any():
            t = int(np.argwhere(bad)[0][-1]) + 1
            raise ObservationDomainError("non-positive or non-finite dispersion", t)
        return None
    return bad.any(axis=-1)


def evaluate_state(
    model: ModelSpec, theta, y, covariates, order: int = 2, errors: str = "raise"
) -> DesignState:
    """Batched design quantities for a max-family model.

    ``theta`` has shape ``(..., p)``; ``y`` has shape ``(n,)`` or ``(..., n)``.
    With ``errors="mask"``, batch rows outside the parameter domain are
    flagged in ``DesignState.invalid`` instead of raising.
    """
    if model.family != "max":
        raise ModelError("design quantities are defined for the max family; use to_max_form")
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    k = model.k
    loc = model.loc_expr.evaluate(theta[..., :k], covariates, n=n, order=order, errors=errors)
    disp = model.disp_expr.evaluate(theta[..., k:], covariates, n=n, order=order, errors=errors)
    glink = LOCATION_LINKS[model.loc_link]
    hlink = DISPERSION_LINKS[model.disp_link]
    with np.errstate(all="ignore"):
        mu = glink.inverse(loc.value)
        phi = hlink.inverse(disp.value)
        invalid = _check_phi(phi, errors)
        z = (y - mu) / phi
        zbrev = np.exp(-z)
        T = 1.0 / glink.d1(mu)
        S = glink.d2(mu)
        H = 1.0 / hlink.d1(phi)
        Q = hlink.d2(phi)
    if errors == "mask":
        invalid = (
            invalid
            | loc.invalid
            | disp.invalid
            | ~np.all(np.isfinite(zbrev), axis=-1)
            | ~np.all(np.isfinite(mu), axis=-1)
        )
    return DesignState(
        y=y,
        mu=mu,
        phi=phi,
        z=z,
        zbrev=zbrev,
        T=T,
        H=H,
        S=S,
        Q=Q,
        X=loc.jac,
        Z=disp.jac,
        Xdot=loc.hess,
        Zdot=disp.hess,
        invalid=invalid,
    )


@dataclass
class DesignShift:
    """Accurate differences between two states of the same data.

    ``dmu = mu_a - mu_b``, ``log_ratio = log(phi_a / phi_b)`` and
    ``ratio_m1 = phi_a / phi_b - 1``.
    """

    dmu: np.ndarray
    log_ratio: np.ndarray
    ratio_m1: np.ndarray


def design_shift(model: ModelSpec, a: DesignState, b: DesignState, theta_a, theta_b) -> DesignShift:
    """Differences of location and dispersion between states ``a`` and ``b``.

    For a predictor that is linear in its parameters the change of the
    predictor is ``jacobian @ (theta_a - theta_b)``, which keeps full relative
    precision when the two parameter values are close; subtracting the two
    rounded predictor values would not. Nonlinear predictors fall back to the
    plain difference.
    """
    theta_a = np.asarray(_flat(model, theta_a), dtype=float)
    theta_b = np.asarray(_flat(model, theta_b), dtype=float)
    k = model.k
    if model.loc_expr.is_linear():
        deta = np.einsum("...nk,...k->...n", b.X, theta_a[..., :k] - theta_b[..., :k])
        dmu = deta if model.loc_link == "identity" else b.mu * np.expm1(deta)
    else:
        dmu = a.mu - b.mu
    if model.disp_expr.is_linear():
        ddelta = np.einsum("...nm,...m->...n", b.Z, theta_a[..., k:] - theta_b[..., k:])
        if model.disp_link == "log":
            log_ratio, ratio_m1 = ddelta, np.expm1(ddelta)
        else:
            ratio_m1 = ddelta / b.phi
            log_ratio = np.log1p(ratio_m1)
    else:
        ratio_m1 = a.phi / b.phi - 1.0
        log_ratio = np.log(a.phi / b.phi)
    return DesignShift(dmu=dmu, log_ratio=log_ratio, ratio_m1=ratio_m1)


def design_state(model: ModelSpec, theta, data: ObservationSet, order: int = 2) -> DesignState:
    """All per-observation quantities of ``model`` at ``theta`` for one dataset.

    Minimum-family models are first reduced with :func:`to_max_form`.
    """
    if model.family == "min":
        model, data = to_max_form(model, data)
    return evaluate_state(model, _flat(model, theta), data.response, data.covariates, order=order)


@functools.lru_cache(maxsize=64)
def _max_form_model(model: ModelSpec) -> ModelSpec:
    glink = LOCATION_LINKS[model.loc_link]
    root = Node("neg", (glink.to_node(model.loc_expr.root),))
    loc = PredictorExpr(root, model.loc_expr.params)
    return ModelSpec(loc, model.disp_expr, family="max", loc_link="identity", disp_link=model.disp_link)


def to_max_form(model: ModelSpec, data=None):
    """Rewrite a min-family model as a max-family model for the negated response.

    ``y ~ EV_min(mu, phi)`` implies ``-y ~ EV_max(-mu, phi)``, so the model
    becomes an identity-link max model with location predictor
    ``-g^{-1}(eta(x, beta))`` and unchanged dispersion. Parameters keep their
    names and meaning.

    ``data`` may be an :class:`ObservationSet`, a response array, or ``None``.
    """
    if model.family != "min":
        raise ModelError("to_max_form expects a min-family model")
    new = _max_form_model(model)
    if data is None:
        return new, None
    if isinstance(data, ObservationSet):
        return new, data.with_response(-data.response)
    return new, -np.asarray(data, dtype=float)


def max_form(model: ModelSpec, y):
    """``(model, y)`` in max form; identity for max-family models."""
    if model.family == "min":
        return to_max_form(model, y)
    return model, y


def open_uniforms(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws strictly inside (0, 1) on a 2**-53 grid offset by half a step."""
    k = rng.integers(0, 2**53, size=size, dtype=np.int64)
    return (k.astype(float) + 0.5) * 2.0**-53


def sample_response(
    model: ModelSpec,
    theta,
    covariates: Mapping[str, np.ndarray],
    rng: np.random.Generator | None = None,
    uniforms=None,
    n: int | None = None,
) -> np.ndarray:
    """Draw responses by inverting the extreme-value CDF.

    For the max family ``y = mu - phi*log(-log(U))``; for the min family
    ``y = mu + phi*log(-log(U))``. Either ``rng`` or explicit ``uniforms``
    (values in (0, 1)) must be given.
    """
    theta = _flat(model, theta)
    if uniforms is None:
        if rng is None:
            raise ValueError("provide rng or uniforms")
        if n is None:
            cols = [np.asarray(covariates[c]) for c in model.covariates]
            if not cols:
                raise ValueError("n is required when the model has no covariates")
            n = cols[0].shape[-1]
        u = open_uniforms(rng, theta.shape[:-1] + (n,))
    else:
        u = np.asarray(uniforms, dtype=float)
        n = u.shape[-1]
    mu, phi, _ = location_dispersion(model, theta, covariates, n)
    g = np.log(-np.log(u))
    if model.family == "max":
        return mu - phi * g
    return mu + phi * g


def rank_warnings(state: DesignState, tol: float = 1e-10) -> list[str]:
    """Rank deficiency warnings for X and Z of a single (unbatched) state."""
    out = []
    for label, mat in (("X", state.X), ("Z", state.Z)):
        if mat is None or mat.ndim != 2:
            continue
        s = np.linalg.svd(mat, compute_uv=False)
        rank = int(np.sum(s > tol * (s[0] if s.size else 0.0)))
        if rank < mat.shape[1]:
            out.append(f"rank({label}) = {rank} < {mat.shape[1]}")
    return out
