import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from satqkd.counts import BlockCounts, ProtocolParams
from satqkd.finitekey import (
    SecurityParams, binary_entropy, binomial_quantile, decoy_bounds, error_correction_bits,
    error_correction_bits_switched, hoeffding_deviation, sampling_correction, secret_key_length,
    security_overhead_bits, skl,
)

SEC = SecurityParams()


def exact_binomial_quantile(prob, n, p):
    """Smallest k with P[Bin(n, p) <= k] >= prob, by summing the pmf upward in high precision."""
    with mpmath.workdps(40):
        p = mpmath.mpf(p)
        ratio = p / (1 - p)
        pmf = (1 - p) ** n
        cdf = pmf
        k = 0
        while cdf < prob:
            pmf *= (n - k) * ratio / (k + 1)
            k += 1
            cdf += pmf
        return k


def leakage_with_quantile(n, q, eps_c, quantile):
    q = min(max(q, 1 / n), 0.5 - 1 / n)
    h = -q * math.log2(q) - (1 - q) * math.log2(1 - q)
    llr = math.log2((1 - q) / q)
    return n * h + n * (1 - q) * llr - (quantile - 1) * llr - 0.5 * math.log2(n) - math.log2(1 / eps_c)


def f_ec(n, q):
    return error_correction_bits(n, q, SEC.epsilon_c) / (n * binary_entropy(q))


@pytest.mark.parametrize("n", [10, 100, 1000, 10_000, 100_000])
@pytest.mark.parametrize("q", [0.005, 0.02, 0.1])
def test_quantile_matches_exact_summation(n, q):
    assert binomial_quantile(SEC.epsilon_c, n, 1 - q) == exact_binomial_quantile(SEC.epsilon_c, n, 1 - q)


@pytest.mark.parametrize("n,q", [(1000, 0.02), (10_000, 0.01), (100_000, 0.01), (100_000, 0.03)])
def test_leakage_matches_oracle(n, q):
    oracle = leakage_with_quantile(n, q, SEC.epsilon_c, exact_binomial_quantile(SEC.epsilon_c, n, 1 - q))
    assert error_correction_bits(n, q, SEC.epsilon_c) == pytest.approx(oracle, rel=1e-3)


def test_quantile_edges():
    assert binomial_quantile(0.5, 0, 0.3) == 0
    assert binomial_quantile(1e-15, 50, 1.0) == 50
    assert binomial_quantile(0.999, 50, 0.0) == 0
    with pytest.raises(ValueError):
        binomial_quantile(1.0, 10, 0.5)


def test_large_block_efficiency_limit():
    assert f_ec(1e12, 0.01) < 1.02


def test_efficiency_falls_with_block_size():
    ratios = [f_ec(n, 0.01) for n in np.logspace(6, 12, 13)]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    assert ratios[0] > 1.0


def test_leakage_errors():
    with pytest.raises(ValueError):
        error_correction_bits(0.5, 0.01, 1e-15)
    with pytest.raises(ValueError):
        error_correction_bits(1e4, 0.5, 1e-15)
    assert error_correction_bits(3, 0.01, 1e-15) == 0.0


def test_switched_leakage():
    n, q = 1e11, 0.01
    base = error_correction_bits(n, q, SEC.epsilon_c)
    switched = error_correction_bits_switched(n, q, SEC.epsilon_c, 1.05)
    assert switched > base
    assert switched == pytest.approx(1.05 * n * binary_entropy(q))
    # small block: the quantile leakage already exceeds the floor
    n_small = 2e4
    assert f_ec(n_small, q) > 1.05
    assert error_correction_bits_switched(n_small, q, SEC.epsilon_c) == error_correction_bits(n_small, q, SEC.epsilon_c)
    with pytest.raises(ValueError):
        error_correction_bits_switched(n, q, SEC.epsilon_c, 0.9)


def test_hoeffding_and_sampling_values():
    assert hoeffding_deviation(2e6, 1e-10) == pytest.approx(math.sqrt(1e6 * math.log(1e10)))
    assert hoeffding_deviation(0, 1e-10) == 0.0
    eps, b, c, d = 1e-10 / 21, 0.02, 1e5, 1e6
    expected = math.sqrt((c + d) * (1 - b) * b / (c * d * math.log(2))
                         * math.log2((c + d) / (c * d * (1 - b) * b) * (21**2 / 1e-10**2)))
    assert sampling_correction(eps, b, c, d) == pytest.approx(expected, rel=1e-12)


def test_security_overhead():
    assert security_overhead_bits(SEC) == pytest.approx(6 * math.log2(21 / 1e-10) + math.log2(2 / 1e-15))


def noise_free_block(mu, p_mu, eta=1e-2, y0=2e-6, pulses=1e10):
    """Counts from a channel with background yield y0 and no errors, in both bases."""
    n = [pulses * p * (1 - (1 - y0) * math.exp(-m * eta)) for p, m in zip(p_mu, mu)]
    return BlockCounts(np.array([n, n]), np.zeros((2, 3)), pulses, 0.0)


def true_yields(mu, p_mu, eta=1e-2, y0=2e-6, pulses=1e10):
    tau0 = sum(p * math.exp(-m) for p, m in zip(p_mu, mu))
    tau1 = sum(p * math.exp(-m) * m for p, m in zip(p_mu, mu))
    return pulses * tau0 * y0, pulses * tau1 * (1 - (1 - y0) * (1 - eta))


def test_decoy_bounds_reproduce_poisson_yields():
    mu, p_mu = (0.5, 0.02, 0.0), (0.6, 0.3, 0.1)
    params = ProtocolParams(p_mu=p_mu, mu=mu)
    b = decoy_bounds(noise_free_block(mu, p_mu), params, SEC, deviations=False)
    s0, s1 = true_yields(mu, p_mu)
    assert b.s_x0 == pytest.approx(s0, rel=0.01)
    assert b.s_x1 == pytest.approx(s1, rel=0.01)
    assert b.v_z1 == 0.0


def test_decoy_bounds_are_lower_bounds():
    mu, p_mu = (0.71, 0.14, 0.0), (0.7, 0.2, 0.1)
    params = ProtocolParams(p_mu=p_mu, mu=mu)
    b = decoy_bounds(noise_free_block(mu, p_mu), params, SEC, deviations=False)
    s0, s1 = true_yields(mu, p_mu)
    assert b.s_x0 <= s0 * (1 + 1e-9)
    assert b.s_x1 <= s1
    with_dev = decoy_bounds(noise_free_block(mu, p_mu), params, SEC)
    assert with_dev.s_x1 < b.s_x1


def realistic_block(scale=1.0, q=0.01):
    n = np.array([[1.2e6, 3.0e5, 4.0e3], [6.0e4, 1.5e4, 2.0e2]]) * scale
    m = n * q
    m[:, 2] = n[:, 2] * 0.5
    return BlockCounts(n, m, 1e11 * scale, 100.0)


def test_realistic_block_gives_key():
    res = skl(realistic_block(), ProtocolParams(), SEC)
    assert res.skl_bits > 0
    assert res.estimation_ok
    assert 0 < res.phi_x < 0.5
    assert res.qber == pytest.approx(
        realistic_block().m_x_total / realistic_block().n_x_total)


def test_empty_block():
    res = skl(BlockCounts(np.zeros((2, 3)), np.zeros((2, 3)), 0.0, 0.0), ProtocolParams(), SEC)
    assert res.skl_bits == 0


@given(st.floats(min_value=0, max_value=1e6), st.floats(min_value=0, max_value=1e6),
       st.floats(min_value=0, max_value=0.5), st.floats(min_value=0, max_value=1e6),
       st.floats(min_value=0, max_value=1e5), st.floats(min_value=0, max_value=0.2))
def test_key_length_monotone_in_leakage_and_phase_error(s0, s1, phi, lam, dlam, dphi):
    base = secret_key_length(s0, s1, phi, lam, SEC)
    assert secret_key_length(s0, s1, phi, lam + dlam, SEC) <= base
    assert secret_key_length(s0, s1, min(phi + dphi, 0.5), lam, SEC) <= base
    assert base >= 0


@given(st.floats(min_value=1.0, max_value=100.0))
def test_more_statistics_never_hurt(c):
    params = ProtocolParams()
    assert skl(realistic_block(c), params, SEC).skl_bits >= skl(realistic_block(1.0), params, SEC).skl_bits


@given(st.lists(st.floats(min_value=0, max_value=1e7), min_size=6, max_size=6),
       st.lists(st.floats(min_value=0, max_value=1), min_size=6, max_size=6))
def test_skl_never_negative(counts, error_fraction):
    n = np.array(counts).reshape(2, 3)
    m = n * np.array(error_fraction).reshape(2, 3) * 0.5
    assert skl(BlockCounts(n, m, 1e12, 1.0), ProtocolParams(), SEC).skl_bits >= 0


def test_security_invariants():
    with pytest.raises(ValueError):
        SecurityParams(epsilon_s=0.0)
    with pytest.raises(ValueError):
        SecurityParams(epsilon_c=1.0)
