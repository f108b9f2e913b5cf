import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from gumbelreg.errors import DomainError
from gumbelreg.specfun import EULER, chi2_ppf, chi2_sf, gamma_derivs, gamma_triple_array, gumbel_weighted_moment

mp.mp.dps = 30


@pytest.mark.parametrize("x", [0.05, 0.5, 1.0, 1.7, 2.0, 3.0, 7.5, 25.0])
def test_gamma_derivs_match_mpmath(x):
    t = gamma_derivs(x)
    assert t.gamma == pytest.approx(float(mp.gamma(x)), rel=1e-13)
    assert t.d1 == pytest.approx(float(mp.diff(mp.gamma, x, 1)), rel=1e-12)
    assert t.d2 == pytest.approx(float(mp.diff(mp.gamma, x, 2)), rel=1e-12)


def test_gamma_derivs_known_values():
    assert gamma_derivs(1.0).d1 == pytest.approx(-EULER, rel=1e-15)
    assert gamma_derivs(2.0).d1 == pytest.approx(1.0 - EULER, rel=1e-14)
    assert gamma_derivs(1.0).d2 == pytest.approx(EULER**2 + math.pi**2 / 6, rel=1e-14)


@pytest.mark.parametrize("x", [0.0, -1.0, math.nan, math.inf])
def test_gamma_derivs_domain(x):
    with pytest.raises(DomainError):
        gamma_derivs(x)


def test_gamma_triple_array_matches_scalar():
    xs = np.array([0.3, 1.0, 2.5, 4.0])
    g, d1, d2 = gamma_triple_array(xs)
    for i, x in enumerate(xs):
        t = gamma_derivs(x)
        assert (g[i], d1[i], d2[i]) == pytest.approx((t.gamma, t.d1, t.d2), rel=1e-15)


def _gumbel_moment_quad(n, c):
    # E_{z ~ EV(0,1)}[z^n exp(-c z)]
    f = lambda z: z**n * math.exp(-c * z) * math.exp(-z - math.exp(-z))
    return quad(f, -10, 60, epsabs=0, epsrel=1e-13, limit=200)[0]


@pytest.mark.parametrize("n", [0, 1, 2])
@pytest.mark.parametrize("c", [-0.5, 0.0, 0.7, 1.0, 2.3])
def test_gumbel_weighted_moment_quadrature(n, c):
    assert gumbel_weighted_moment(n, c) == pytest.approx(_gumbel_moment_quad(n, c), rel=1e-9, abs=1e-12)


def test_gumbel_weighted_moment_errors():
    with pytest.raises(ValueError):
        gumbel_weighted_moment(3, 0.0)
    with pytest.raises(DomainError):
        gumbel_weighted_moment(1, -1.0)


@given(x=st.floats(0.0, 200.0), r=st.integers(1, 12))
@settings(max_examples=60, deadline=None)
def test_chi2_sf_matches_mpmath(x, r):
    expected = float(mp.gammainc(mp.mpf(r) / 2, mp.mpf(x) / 2, mp.inf, regularized=True))
    assert chi2_sf(x, r) == pytest.approx(expected, rel=1e-10, abs=1e-300)


def test_chi2_sf_reference_points():
    assert chi2_sf(3.841458820694124, 1) == pytest.approx(0.05, rel=1e-12)
    assert chi2_sf(0.0, 3) == 1.0
    assert chi2_sf(2.0, 2) == pytest.approx(math.exp(-1.0), rel=1e-14)


@pytest.mark.parametrize("x,r", [(-1.0, 1), (math.nan, 2), (1.0, 0), (1.0, 1.5)])
def test_chi2_sf_domain(x, r):
    with pytest.raises(DomainError):
        chi2_sf(x, r)


@given(p=st.floats(1e-6, 1 - 1e-6), r=st.integers(1, 8))
@settings(max_examples=40, deadline=None)
def test_chi2_ppf_inverts_sf(p, r):
    assert chi2_sf(chi2_ppf(p, r), r) == pytest.approx(1.0 - p, rel=1e-9, abs=1e-12)
