import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gumbelreg.errors import ArityError, FormulaDomainError, FormulaSyntaxError, UnknownIdentifierError
from gumbelreg.formula import differentiate, parse_predictor, scan_identifiers

PARAMS = ["b0", "b1", "b2"]
COVS = ["x1", "x2"]


def fd_jac_hess(expr, theta, data, h=1e-5, h2=1e-4):
    p = len(theta)
    f = lambda t: expr.evaluate(t, data, order=0).value
    jac = np.empty((len(f(theta)), p))
    hess = np.empty((len(f(theta)), p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h
        jac[:, j] = (f(theta + e) - f(theta - e)) / (2 * h)
        for k in range(p):
            a = np.zeros(p)
            a[j] = h2
            b = np.zeros(p)
            b[k] = h2
            hess[:, j, k] = (
                f(theta + a + b) - f(theta + a - b) - f(theta - a + b) + f(theta - a - b)
            ) / (4 * h2 * h2)
    return jac, hess


FORMULAS = [
    "b0 + b1*x1 + pow(x2, b2)",
    "b0 + exp(b1 + b2*x1)",
    "b0 * x1 / (1 + b1*x2) - b2^2",
    "log(b0 + x2) + b1*b2*x1",
    "-(b0 - b1) * exp(-b2 * x2) + x1^2",
]


@pytest.mark.parametrize("text", FORMULAS)
def test_symbolic_derivatives_match_finite_differences(text):
    rng = np.random.default_rng(7)
    data = {"x1": rng.uniform(0.2, 1.0, 9), "x2": rng.uniform(0.2, 1.0, 9)}
    expr = parse_predictor(text, PARAMS, COVS)
    theta = np.array([0.8, 0.3, 0.6])
    b = differentiate(expr, theta, data)
    jac, hess = fd_jac_hess(expr, theta, data)
    np.testing.assert_allclose(b.jac, jac, rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(b.hess, hess, rtol=1e-5, atol=1e-6)
    assert np.array_equal(b.hess, np.swapaxes(b.hess, -1, -2))


def test_known_derivatives_of_power_term():
    data = {"x1": np.array([0.5, 1.0]), "x2": np.array([0.25, 2.0])}
    expr = parse_predictor("b0 + b1*x1 + pow(x2, b2)", PARAMS, COVS)
    b = differentiate(expr, np.array([1.0, 2.0, 0.5]), data)
    x2 = data["x2"]
    np.testing.assert_allclose(b.value, 1 + 2 * data["x1"] + np.sqrt(x2))
    np.testing.assert_allclose(b.jac[:, 2], np.log(x2) * np.sqrt(x2))
    np.testing.assert_allclose(b.hess[:, 2, 2], np.log(x2) ** 2 * np.sqrt(x2))
    assert np.all(b.hess[:, :2, :] == 0.0)


def test_batched_evaluation_matches_loop():
    rng = np.random.default_rng(1)
    data = {"x1": rng.uniform(0.2, 1, 6), "x2": rng.uniform(0.2, 1, 6)}
    expr = parse_predictor(FORMULAS[0], PARAMS, COVS)
    thetas = rng.uniform(0.1, 1, (4, 3))
    batch = expr.evaluate(thetas, data)
    assert batch.value.shape == (4, 6)
    assert batch.jac.shape == (4, 6, 3)
    assert batch.hess.shape == (4, 6, 3, 3)
    for i in range(4):
        one = expr.evaluate(thetas[i], data)
        np.testing.assert_array_equal(batch.value[i], one.value)
        np.testing.assert_array_equal(batch.hess[i], one.hess)


def test_linearity_detection():
    assert parse_predictor("b0 + b1*x1 - 2*b2*x2", PARAMS, COVS).is_linear()
    expr = parse_predictor("b0 + b1*x1 + pow(x2, b2)", PARAMS, COVS)
    assert expr.linear_params() == (0, 1)


@pytest.mark.parametrize(
    "text,offset",
    [("b0 + + x1", 5), ("b0 * (x1", 8), ("b0 x1", 3), ("", 0), ("b0 + 1.2.3", 8)],
)
def test_syntax_error_offsets(text, offset):
    with pytest.raises(FormulaSyntaxError) as err:
        parse_predictor(text, PARAMS, COVS)
    assert err.value.offset == offset


def test_non_ascii_character_is_rejected_at_its_offset():
    with pytest.raises(FormulaSyntaxError) as err:
        parse_predictor("b0 + é", PARAMS, COVS)
    assert err.value.offset == 5


def test_unknown_identifier_and_arity():
    with pytest.raises(UnknownIdentifierError):
        parse_predictor("b0 + q*x1", PARAMS, COVS)
    with pytest.raises(ArityError):
        parse_predictor("pow(x1)", PARAMS, COVS)
    with pytest.raises(ArityError):
        parse_predictor("exp(b0, b1)", PARAMS, COVS)


def test_domain_error_reports_observation():
    data = {"x1": np.array([1.0, 2.0, -1.0, 3.0]), "x2": np.ones(4)}
    expr = parse_predictor("b0 + log(x1)", PARAMS[:1], COVS)
    with pytest.raises(FormulaDomainError) as err:
        expr.evaluate(np.array([0.0]), data)
    assert err.value.index == 3
    masked = expr.evaluate(np.array([[0.0], [1.0]]), data, errors="mask")
    assert masked.invalid.tolist() == [True, True]


def test_pow_domain_with_parameter_exponent():
    data = {"x1": np.array([0.5, 0.0]), "x2": np.ones(2)}
    expr = parse_predictor("pow(x1, b0)", PARAMS[:1], COVS)
    with pytest.raises(FormulaDomainError) as err:
        expr.evaluate(np.array([0.5]), data)
    assert err.value.index == 2


def test_scan_identifiers():
    assert scan_identifiers("b0 + exp(b1*x)") == ["b0", "b1", "x"]


_leaf = st.sampled_from(["b0", "b1", "b2", "x1", "x2", "1.5", "2"])


def _build(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda t: f"({t[0]} {t[1]} {t[2]})"),
        children.map(lambda c: f"exp({c} / 10)"),
        children.map(lambda c: f"-{c}"),
    )


@given(st.recursive(_leaf, _build, max_leaves=8))
@settings(max_examples=80, deadline=None)
def test_printing_round_trips(text):
    expr = parse_predictor(text, PARAMS, COVS)
    again = parse_predictor(expr.to_string(), PARAMS, COVS)
    assert again.root == expr.root
    data = {"x1": np.array([0.3, 0.7]), "x2": np.array([0.4, 0.9])}
    th = np.array([0.2, -0.1, 0.5])
    np.testing.assert_array_equal(
        expr.evaluate(th, data, n=2).value, again.evaluate(th, data, n=2).value
    )
