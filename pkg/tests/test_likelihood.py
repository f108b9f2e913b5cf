import numpy as np
import pytest
from scipy.integrate import quad

from conftest import MODELS, design, random_theta
from gumbelreg.likelihood import (
    GAMMA2_AT_2,
    expected_info,
    loglik,
    loglik_ratio,
    observed_info,
    score,
)
from gumbelreg.model import design_shift, evaluate_state, sample_response


def _setup(name, seed, n=12):
    rng = np.random.default_rng(seed)
    m = MODELS[name]()
    cov = design(m, n, rng)
    th = random_theta(name, rng)
    y = sample_response(m, th, cov, rng=rng)
    return m, cov, th, y


def _ll(m, th, y, cov):
    return loglik(evaluate_state(m, th, y, cov, order=0))


@pytest.mark.parametrize("name", list(MODELS))
@pytest.mark.parametrize("seed", range(3))
def test_score_and_observed_info_match_finite_differences(name, seed):
    m, cov, th, y = _setup(name, seed)
    st = evaluate_state(m, th, y, cov)
    U = score(st).flat
    J = observed_info(st).full
    p = m.p
    h = 1e-6 * np.maximum(1.0, np.abs(th))
    g = np.empty(p)
    H = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h[j]
        g[j] = (_ll(m, th + e, y, cov) - _ll(m, th - e, y, cov)) / (2 * h[j])
        up = score(evaluate_state(m, th + e, y, cov, order=1)).flat
        dn = score(evaluate_state(m, th - e, y, cov, order=1)).flat
        H[:, j] = (up - dn) / (2 * h[j])
    assert np.max(np.abs(U - g)) <= 1e-7 * max(1.0, np.max(np.abs(g)))
    assert np.max(np.abs(J + H)) <= 1e-5 * max(1.0, np.max(np.abs(H)))
    assert np.array_equal(J, J.T)


def _per_obs_expectations(m, th, cov, n):
    """E[U] and E[J] by quadrature over each observation's Gumbel law."""
    p = m.p
    EU = np.zeros(p)
    EJ = np.zeros((p, p))
    base = evaluate_state(m, th, np.zeros(n), cov)
    for t in range(n):
        dens = lambda z: np.exp(-z - np.exp(-z))
        # observation t on its own: a one-row slice of the design
        sub = {c: v[t : t + 1] for c, v in cov.items()}
        for a in range(p):
            def fu(z, a=a):
                y = np.array([base.mu[t] + base.phi[t] * z])
                return score(evaluate_state(m, th, y, sub)).flat[a] * dens(z)
            EU[a] += quad(fu, -8, 40, epsabs=1e-12, limit=200)[0]
            for b in range(a, p):
                def fj(z, a=a, b=b):
                    y = np.array([base.mu[t] + base.phi[t] * z])
                    return observed_info(evaluate_state(m, th, y, sub)).full[a, b] * dens(z)
                EJ[a, b] = EJ[b, a] = EJ[a, b] + quad(fj, -8, 40, epsabs=1e-12, limit=200)[0]
    return EU, EJ


@pytest.mark.parametrize("name", ["model2", "model3", "loglinks"])
def test_expected_info_equals_mean_observed_info(name):
    m, cov, th, y = _setup(name, 11, n=4)
    EU, EJ = _per_obs_expectations(m, th, cov, 4)
    I = expected_info(evaluate_state(m, th, y, cov)).full
    np.testing.assert_allclose(EU, 0.0, atol=1e-9)
    np.testing.assert_allclose(EJ, I, rtol=1e-8, atol=1e-10)


def test_gamma2_constant():
    assert GAMMA2_AT_2 == pytest.approx(0.8236806608528764, rel=1e-14)


def test_info_blocks_layout():
    m, cov, th, y = _setup("model2", 2)
    I = expected_info(evaluate_state(m, th, y, cov))
    assert I.beta_beta.shape == (4, 4)
    assert I.beta_gamma.shape == (4, 4)
    np.testing.assert_array_equal(I.beta_gamma, I.full[:4, 4:])
    np.testing.assert_array_equal(I.full, I.full.T)
    assert np.all(np.linalg.eigvalsh(I.full) > 0)


@pytest.mark.parametrize("name", list(MODELS))
def test_loglik_ratio_matches_difference(name):
    m, cov, th, y = _setup(name, 4)
    th2 = th + 0.01
    a = evaluate_state(m, th, y, cov)
    b = evaluate_state(m, th2, y, cov)
    direct = 2 * (loglik(a) - loglik(b))
    assert loglik_ratio(a, b) == pytest.approx(direct, rel=1e-9, abs=1e-12)
    shift = design_shift(m, a, b, th, th2)
    assert loglik_ratio(a, b, shift) == pytest.approx(direct, rel=1e-9, abs=1e-12)


def test_batched_quantities_match_single():
    m, cov, th, y = _setup("model2", 6)
    thetas = np.stack([th, th + 0.05, th - 0.05])
    st = evaluate_state(m, thetas, y, cov)
    J = observed_info(st).full
    for i in range(3):
        np.testing.assert_allclose(J[i], observed_info(evaluate_state(m, thetas[i], y, cov)).full, rtol=1e-14)
