import numpy as np
import pytest

from conftest import MODELS, TRUE_THETA, design, model1, model3
from gumbelreg.errors import FitError, ModelError
from gumbelreg.estimate import Hypothesis, default_init, fit_batch, fit_mle
from gumbelreg.model import ModelSpec, ObservationSet, sample_response
from gumbelreg.specfun import EULER


def _data(name, n, seed):
    rng = np.random.default_rng(seed)
    m = MODELS[name]()
    cov = design(m, n, rng)
    y = sample_response(m, TRUE_THETA[name], cov, rng=rng)
    return m, ObservationSet(y, cov)


@pytest.mark.parametrize("name", list(MODELS))
def test_large_sample_consistency(name):
    m, data = _data(name, 5000, 1)
    fit = fit_mle(m, data)
    assert fit.converged
    se = fit.standard_errors()
    assert np.all(np.abs(fit.theta.flat - TRUE_THETA[name]) < 3 * se)


@pytest.mark.parametrize("name", list(MODELS))
def test_gradient_vanishes_at_solution(name):
    m, data = _data(name, 40, 2)
    fit = fit_mle(m, data)
    assert fit.converged
    assert fit.score_norm <= 1e-8 * max(1.0, abs(fit.loglik))
    assert np.isfinite(fit.loglik)


def test_hypothesis_parsing():
    h = Hypothesis.parse("b2=0, b3=1.5")
    assert h.names == ("b2", "b3") and h.values.tolist() == [0.0, 1.5]
    assert Hypothesis.parse(["b2=0", "b3=0"]).r == 2
    with pytest.raises(ModelError):
        Hypothesis.parse("b2=0,b2=1")
    with pytest.raises(ModelError):
        Hypothesis.parse("b2")
    with pytest.raises(ModelError):
        Hypothesis.parse("b2=zero")
    m = model1()
    with pytest.raises(ModelError):
        Hypothesis.parse("q=0").indices(m)
    with pytest.raises(ModelError):
        Hypothesis.parse(",".join(f"{n}=0" for n in m.param_names)).indices(m)


def test_restricted_coordinates_are_exact():
    m, data = _data("model1", 20, 3)
    hyp = Hypothesis.parse("b2=0.123456789,b4=6")
    fit = fit_mle(m, data, restriction=hyp)
    assert fit.theta.flat[1] == 0.123456789 and fit.theta.flat[3] == 6.0
    free = [0, 2, 4, 5]
    assert np.max(np.abs(fit.score[free])) <= 1e-8 * max(1.0, abs(fit.loglik))


def test_one_free_parameter():
    m, data = _data("model2", 30, 4)
    th = TRUE_THETA["model2"]
    names = [n for n in m.param_names if n != "b1"]
    hyp = Hypothesis(tuple((n, float(th[m.index(n)])) for n in names))
    fit = fit_mle(m, data, restriction=hyp)
    assert fit.converged
    assert abs(fit.score[0]) <= 1e-8 * max(1.0, abs(fit.loglik))


def test_restricted_loglik_never_exceeds_unrestricted():
    for seed in range(5):
        m, data = _data("model3", 20, 10 + seed)
        hyp = Hypothesis.parse("b2=0")
        tilde = fit_mle(m, data, restriction=hyp)
        hat = fit_mle(m, data, init=tilde.theta)
        assert 2 * (hat.loglik - tilde.loglik) >= -1e-9


def test_refit_from_optimum_is_idempotent():
    m, data = _data("model2", 50, 5)
    fit = fit_mle(m, data)
    again = fit_mle(m, data, init=fit.theta)
    assert again.iterations <= 2
    np.testing.assert_allclose(again.theta.flat, fit.theta.flat, rtol=1e-9, atol=1e-11)


def test_monotone_ascent_is_recorded():
    rng = np.random.default_rng(6)
    m = model1()
    cov = design(m, 15, rng)
    y = sample_response(m, np.tile(TRUE_THETA["model1"], (50, 1)), cov, rng=rng)
    bf = fit_batch(m, y, cov, np.zeros((50, m.p)))
    assert bf.converged.all()
    assert bf.loglik_path_ok.all()


def test_default_init_intercept_only():
    rng = np.random.default_rng(7)
    m = ModelSpec.from_formulas("b0", "g0", ["b0"], ["g0"])
    y = rng.gumbel(3.0, 0.5, 40)
    init = default_init(m, ObservationSet(y))
    phi0 = y.std(ddof=1) * np.sqrt(6) / np.pi
    assert init.gamma[0] == pytest.approx(np.log(phi0), rel=1e-12)
    assert init.beta[0] == pytest.approx(y.mean() - EULER * phi0, rel=1e-12)


def test_default_init_identity_dispersion_link():
    rng = np.random.default_rng(8)
    m = ModelSpec.from_formulas("b0", "g0", ["b0"], ["g0"], disp_link="identity")
    y = rng.gumbel(0.0, 2.0, 30)
    init = default_init(m, ObservationSet(y))
    assert init.gamma[0] == pytest.approx(y.std(ddof=1) * np.sqrt(6) / np.pi, rel=1e-12)


def test_default_init_is_deterministic_and_seeds_nonlinear_terms_at_zero():
    m, data = _data("model3", 25, 9)
    a, b = default_init(m, data), default_init(m, data)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert a.beta[2] == 0.0


def test_collinear_design_falls_back_and_warns():
    rng = np.random.default_rng(10)
    m = ModelSpec.from_formulas("b0 + b1*x + b2*w", "g0", ["b0", "b1", "b2"], ["g0"])
    x = rng.uniform(-0.5, 0.5, 30)
    data = ObservationSet(rng.gumbel(0.0, 1.0, 30), {"x": x, "w": 2 * x})
    init = default_init(m, data)
    assert init.beta[1] == 0.0 and init.beta[2] == 0.0
    fit = fit_mle(m, data)
    assert fit.rank_warnings == ["rank(X) = 2 < 3"]
    # the identifiable combination b1 + 2*b2 is still maximised
    assert abs(fit.score[1]) < 1e-6


def test_degenerate_response_is_rejected():
    m = ModelSpec.from_formulas("b0", "g0", ["b0"], ["g0"])
    with pytest.raises(FitError):
        fit_mle(m, ObservationSet(np.full(10, 2.0)))


def test_too_few_observations():
    m = model1()
    rng = np.random.default_rng(0)
    cov = design(m, 5, rng)
    with pytest.raises(FitError):
        fit_mle(m, ObservationSet(rng.normal(size=5), cov))


def test_min_family_fit_matches_negated_max_fit():
    m, data = _data("model1", 25, 11)
    mn = ModelSpec(m.loc_expr, m.disp_expr, family="min")
    hat_max = fit_mle(m, data)
    hat_min = fit_mle(mn, data.with_response(-data.response))
    flat = hat_max.theta.flat.copy()
    flat[:5] *= -1
    np.testing.assert_allclose(hat_min.theta.flat, flat, rtol=1e-9, atol=1e-10)
    assert hat_min.loglik == pytest.approx(hat_max.loglik, rel=1e-12)


def test_fit_batch_matches_single_fits():
    rng = np.random.default_rng(12)
    m = model3()
    cov = design(m, 20, rng)
    y = sample_response(m, np.tile(TRUE_THETA["model3"], (4, 1)), cov, rng=rng)
    from gumbelreg.estimate import default_init_batch

    bf = fit_batch(m, y, cov, default_init_batch(m, y, cov))
    for i in range(4):
        one = fit_mle(m, ObservationSet(y[i], cov))
        np.testing.assert_allclose(bf.theta[i], one.theta.flat, rtol=1e-8, atol=1e-10)
