import numpy as np
import pytest
from hypothesis import given, strategies as st

from heatsdf.profiles import (eta, eta_delta, eta_prime, mu, mu_prime, mu_sigma,
                              mu_sigma_prime)


def test_eta_values():
    d = 0.005
    assert eta_delta(0.0, d) == 0.5
    assert eta_delta(-2 * d, d) == 1.0
    assert eta_delta(2 * d, d) == 0.0
    assert eta_delta(d / 2, d) == pytest.approx(0.15625, abs=1e-15)


def test_mu_values():
    assert mu(0.0) == 1.0 and mu(1.0) == 0.0
    assert mu(-3.0) == 1.0 and mu(4.0) == 0.0
    assert mu(0.5) == pytest.approx(0.5)


@pytest.mark.parametrize("f, knots, width", [
    (eta, (-1.0, 1.0), 1.0),
    (mu, (0.0, 1.0), 1.0),
    (lambda s: eta_delta(s, 0.005), (-0.005, 0.005), 0.005),
    (lambda s: mu_sigma(s, 0.05), (-0.05, -0.025, 0.025, 0.05), 0.025),
])
def test_c1_at_knots(f, knots, width):
    # one-sided slopes agree at every knot, in units of the profile width
    e = 1e-9 * width
    for k in knots:
        left = (f(k) - f(k - e)) / e
        right = (f(k + e) - f(k)) / e
        assert abs(left - right) * width < 1e-6
        assert abs(f(k + e) - f(k - e)) < 1e-6


@given(st.floats(-3, 3))
def test_derivatives_match_fd(s):
    for f, fp, scale in ((eta, eta_prime, 1.0), (mu, mu_prime, 1.0),
                         (lambda x: mu_sigma(x, 0.05), lambda x: mu_sigma_prime(x, 0.05), 0.05)):
        x = s * scale
        e = 1e-6 * scale
        fd = (f(x + e) - f(x - e)) / (2 * e)
        assert abs(fd - fp(x)) < 1e-4 / scale


@given(st.floats(-3, 3))
def test_ranges_and_monotone(s):
    assert 0.0 <= eta(s) <= 1.0 and eta_prime(s) <= 0.0
    assert 0.0 <= mu(s) <= 1.0 and mu_prime(s) <= 0.0
    assert eta(s) + eta(-s) == pytest.approx(1.0, abs=1e-15)  # odd around 1/2


def test_mu_sigma_plateau():
    sig = 0.05
    s = np.linspace(-0.025, 0.025, 11)
    assert np.all(mu_sigma(s, sig) == 1.0)
    assert mu_sigma(0.05, sig) == 0.0 and mu_sigma(-0.07, sig) == 0.0
    np.testing.assert_array_equal(mu_sigma(s, sig), mu_sigma(-s, sig))


def test_delta_must_be_positive():
    with pytest.raises(ValueError):
        eta_delta(0.0, 0.0)
