import numpy as np
import pytest

from gumbelreg.model import ModelSpec


def model1():
    return ModelSpec.from_formulas(
        "b1 + b2*x2 + b3*x3 + b4*x4 + b5*x5", "g1", ["b1", "b2", "b3", "b4", "b5"], ["g1"]
    )


def model2():
    return ModelSpec.from_formulas(
        "b1 + b2*x2 + b3*x3 + b4*x4",
        "g1 + g2*z2 + g3*z3 + g4*z4",
        ["b1", "b2", "b3", "b4"],
        ["g1", "g2", "g3", "g4"],
    )


def model3():
    return ModelSpec.from_formulas(
        "b0 + b1*x1 + pow(x2, b2)", "g0", ["b0", "b1", "b2"], ["g0"], disp_link="identity"
    )


def model_loglinks():
    """Nonlinear location on the log link with a log-linear dispersion."""
    return ModelSpec.from_formulas(
        "b0 + b1*x1 + pow(x2, b2)", "g0 + g1*x1", ["b0", "b1", "b2"], ["g0", "g1"], loc_link="log"
    )


def model_wheat():
    return ModelSpec.from_formulas("b0 + exp(b1 + b2*x)", "g1*x", ["b0", "b1", "b2"], ["g1"])


def design(model, n, rng):
    """Covariates: U(-0.5, 0.5) for linear models, U(0.2, 1) when a power appears."""
    positive = any(c in ("x1", "x2", "x") for c in model.covariates) and "pow" in model.loc_expr.text
    cov = {}
    for c in model.covariates:
        cov[c] = rng.uniform(0.2, 1.0, n) if positive else rng.uniform(-0.5, 0.5, n)
    return cov


TRUE_THETA = {
    "model1": np.array([1.0, 0.0, 1.0, 6.0, -3.0, np.log(0.1)]),
    "model2": np.array([1.0, 1.0, 6.0, 0.0, np.log(0.1), -2.0, -2.0, 0.1]),
    "model3": np.array([1.0, 1.0, 0.0, np.exp(0.1)]),
    "loglinks": np.array([1.0, 0.5, 0.3, -1.5, 0.4]),
}

MODELS = {"model1": model1, "model2": model2, "model3": model3, "loglinks": model_loglinks}


def random_theta(name, rng, scale=0.3):
    th = TRUE_THETA[name] + scale * rng.standard_normal(TRUE_THETA[name].shape)
    if name == "model3":
        th[-1] = abs(th[-1]) + 0.2
    return th


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def quadrature_q_upsilon(model, cov, theta1, theta, n, tol=1e-12):
    """Oracle for q = E_1[U(theta1)(l(theta1) - l(theta))] and Upsilon = E_1[U(theta1) U(theta)^T].

    Cross terms between different observations vanish (independence and
    E_1[U_t(theta1)] = 0), so both are sums of one-dimensional integrals over
    each observation's Gumbel law under ``theta1``, done by adaptive
    vector quadrature.
    """
    from scipy.integrate import quad_vec

    from gumbelreg.likelihood import loglik_terms, score
    from gumbelreg.model import evaluate_state

    p = model.p
    base = evaluate_state(model, theta1, np.zeros(n), cov, order=0)
    q = np.zeros(p)
    ups = np.zeros((p, p))
    for t in range(n):
        sub = {c: v[t : t + 1] for c, v in cov.items()}

        def integrand(z):
            y = np.array([base.mu[t] + base.phi[t] * z])
            s1 = evaluate_state(model, theta1, y, sub, order=1)
            s0 = evaluate_state(model, theta, y, sub, order=1)
            u1, u0 = score(s1).flat, score(s0).flat
            dl = loglik_terms(s1)[0] - loglik_terms(s0)[0]
            dens = np.exp(-z - np.exp(-z))
            return np.concatenate([u1 * dl, np.outer(u1, u0).ravel()]) * dens

        val, _ = quad_vec(integrand, -10.0, 60.0, epsabs=tol, epsrel=tol, limit=400)
        q += val[:p]
        ups += val[p:].reshape(p, p)
    return q, ups
