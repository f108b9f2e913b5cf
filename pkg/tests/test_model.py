import numpy as np
import pytest
from scipy import stats

from conftest import TRUE_THETA, design, model1, model3
from gumbelreg.errors import DataError, ModelError, ObservationDomainError
from gumbelreg.model import (
    ModelSpec,
    ObservationSet,
    Theta,
    design_state,
    evaluate_state,
    open_uniforms,
    rank_warnings,
    sample_response,
    to_max_form,
)
from gumbelreg.specfun import EULER


def test_model_dimensions_and_names():
    m = model1()
    assert (m.k, m.m, m.p) == (5, 1, 6)
    assert m.param_names == ("b1", "b2", "b3", "b4", "b5", "g1")
    assert m.covariates == ("x2", "x3", "x4", "x5")
    assert m.index("g1") == 5
    with pytest.raises(ModelError, match="parameters are"):
        m.index("nope")


def test_model_validation():
    with pytest.raises(ModelError):
        ModelSpec.from_formulas("b0", "g0", ["b0"], ["g0"], family="middle")
    with pytest.raises(ModelError):
        ModelSpec.from_formulas("b0", "g0", ["b0"], ["g0"], loc_link="probit")
    with pytest.raises(Exception):
        ModelSpec.from_formulas("b0 + g0", "g0", ["b0", "g0"], ["g0"])


def test_theta_round_trip():
    m = model1()
    th = Theta.from_flat(m, TRUE_THETA["model1"])
    assert th.locate(5) == ("gamma", "g1")
    again = Theta.from_dict(m, th.as_dict())
    np.testing.assert_array_equal(again.flat, th.flat)
    with pytest.raises(ModelError):
        Theta.from_dict(m, {"b1": 1.0})


def test_observation_set_validation():
    with pytest.raises(DataError):
        ObservationSet(np.array([1.0, np.nan]))
    with pytest.raises(DataError):
        ObservationSet(np.ones(3), {"x": np.ones(2)})


def test_design_state_identity_links():
    rng = np.random.default_rng(0)
    m = model1()
    cov = design(m, 12, rng)
    th = TRUE_THETA["model1"]
    y = sample_response(m, th, cov, rng=rng)
    st = design_state(m, th, ObservationSet(y, cov))
    mu = th[0] + sum(th[j - 1] * cov[f"x{j}"] for j in range(2, 6))
    np.testing.assert_allclose(st.mu, mu, rtol=1e-14)
    np.testing.assert_allclose(st.phi, 0.1, rtol=1e-14)
    np.testing.assert_allclose(st.zbrev, np.exp(-st.z), rtol=1e-15)
    assert np.all(st.T == 1.0) and np.all(st.S == 0.0)
    np.testing.assert_allclose(st.H, 0.1)
    np.testing.assert_allclose(st.Q, -1.0 / 0.01)


def test_nonpositive_dispersion_reports_observation():
    m = ModelSpec.from_formulas("b0", "g0 + g1*x", ["b0"], ["g0", "g1"], disp_link="identity")
    cov = {"x": np.array([0.0, 0.5, 2.0, 1.0])}
    with pytest.raises(ObservationDomainError) as err:
        evaluate_state(m, np.array([0.0, 1.0, -0.6]), np.zeros(4), cov)
    assert err.value.index == 3


def test_sampling_matches_gumbel_distribution():
    rng = np.random.default_rng(3)
    m = ModelSpec.from_formulas("b0", "g0", ["b0"], ["g0"])
    y = sample_response(m, [2.0, np.log(0.5)], {}, rng=rng, n=200_000)
    assert stats.kstest(y, stats.gumbel_r(loc=2.0, scale=0.5).cdf).pvalue > 1e-3
    assert y.mean() == pytest.approx(2.0 + EULER * 0.5, abs=0.01)
    assert y.var() == pytest.approx(0.25 * np.pi**2 / 6, rel=0.02)


def test_sampling_min_family_is_negated_max():
    rng = np.random.default_rng(4)
    m = model1()
    cov = design(m, 10, rng)
    mn = ModelSpec(m.loc_expr, m.disp_expr, family="min")
    u = open_uniforms(rng, 10)
    th = TRUE_THETA["model1"]
    neg = th.copy()
    neg[:5] *= -1
    np.testing.assert_array_equal(sample_response(mn, neg, cov, uniforms=u), -sample_response(m, th, cov, uniforms=u))


def test_open_uniforms_strictly_inside():
    u = open_uniforms(np.random.default_rng(0), 100_000)
    assert u.min() > 0.0 and u.max() < 1.0


def _evmin_loglik(model, theta, y, cov):
    # independent oracle: log f(y) = -log(phi) + z - exp(z), z = (y - mu)/phi
    eta = model.loc_expr.evaluate(theta[: model.k], cov, n=len(y), order=0).value
    mu = np.exp(eta) if model.loc_link == "log" else eta
    delta = model.disp_expr.evaluate(theta[model.k :], cov, n=len(y), order=0).value
    phi = np.exp(delta) if model.disp_link == "log" else delta
    z = (y - mu) / phi
    return float(np.sum(-np.log(phi) + z - np.exp(z)))


@pytest.mark.parametrize("loc_link", ["identity", "log"])
def test_to_max_form_preserves_likelihood(loc_link):
    from gumbelreg.likelihood import loglik

    rng = np.random.default_rng(5)
    mn = ModelSpec.from_formulas(
        "b0 + b1*x", "g0 + g1*x", ["b0", "b1"], ["g0", "g1"], family="min", loc_link=loc_link
    )
    cov = {"x": rng.uniform(-0.5, 0.5, 15)}
    th = np.array([1.0, 0.5, np.log(0.3), 0.2])
    y = sample_response(mn, th, cov, rng=rng)
    mmax, data = to_max_form(mn, ObservationSet(y, cov))
    assert mmax.family == "max" and mmax.loc_link == "identity"
    st = evaluate_state(mmax, th, data.response, cov)
    assert loglik(st) == pytest.approx(_evmin_loglik(mn, th, y, cov), rel=1e-13)


def test_rank_warning_for_collinear_design():
    m = ModelSpec.from_formulas("b0 + b1*x + b2*w", "g0", ["b0", "b1", "b2"], ["g0"])
    x = np.linspace(0, 1, 8)
    st = evaluate_state(m, np.zeros(4), np.zeros(8), {"x": x, "w": 2 * x})
    assert rank_warnings(st) == ["rank(X) = 2 < 3"]
