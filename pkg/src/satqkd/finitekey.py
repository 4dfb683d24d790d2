"""Composable finite-key length for efficient decoy-state BB84.

Vacuum and single-photon bounds use Hoeffding deviations and the
three-intensity decoy estimators (signal, decoy, vacuum). The phase error
of single-photon X events is bounded from Z-basis data with a
random-sampling correction. Information leaked by one-way error
correction follows a binomial-quantile estimate.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .counts import X, Z, BlockCounts, ProtocolParams

# Number of failure events the security parameter is split over.
COMPOSITION_TERMS = 21


@dataclass(frozen=True)
class SecurityParams:
    epsilon_s: float = 1e-10
    epsilon_c: float = 1e-15

    def __post_init__(self):
        if not 0 < self.epsilon_s < 1:
            raise ValueError(f"epsilon_s must be in (0, 1), got {self.epsilon_s}")
        if not 0 < self.epsilon_c < 1:
            raise ValueError(f"epsilon_c must be in (0, 1), got {self.epsilon_c}")

    @property
    def epsilon_per_bound(self) -> float:
        return self.epsilon_s / COMPOSITION_TERMS


@dataclass(frozen=True)
class DecoyBounds:
    s_x0: float
    s_x1: float
    s_z0: float
    s_z1: float
    v_z1: float
    phi_x: float
    ok: bool


@dataclass(frozen=True)
class KeyResult:
    skl_bits: int
    s_x0: float
    s_x1: float
    phi_x: float
    lambda_ec_bits: float
    n_x: float
    qber: float
    f_ec_estimate: float
    raw_length: float = float("-inf")
    estimation_ok: bool = False

    @classmethod
    def empty(cls) -> "KeyResult":
        return cls(0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, float("nan"))


def _h(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def binary_entropy(x):
    if isinstance(x, (float, int)):
        return _h(float(x))
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -x * np.log2(x) - (1 - x) * np.log2(1 - x)
    out = np.where((x <= 0) | (x >= 1), 0.0, out)
    return float(out) if out.ndim == 0 else out


def hoeffding_deviation(n: float, eps: float) -> float:
    """Half-width ``sqrt(n/2 ln(1/eps))`` of a Hoeffding interval on a count out of ``n``."""
    if n <= 0:
        return 0.0
    return math.sqrt(0.5 * n * math.log(1.0 / eps))


def sampling_correction(eps: float, rate: float, n_test: float, n_key: float) -> float:
    """Random-sampling correction to an error rate observed on ``n_test`` and applied to ``n_key`` items."""
    c, d, b = n_test, n_key, rate
    if c <= 0 or d <= 0 or b <= 0 or b >= 1:
        return 0.5
    arg = (c + d) / (c * d * (1 - b) * b) / eps**2
    if arg <= 1:
        return 0.0
    return math.sqrt((c + d) * (1 - b) * b / (c * d * math.log(2)) * math.log2(arg))


def poisson_weights(params: ProtocolParams, photons: int) -> float:
    return _tau(params.p_mu, params.mu, photons)


def _tau(p_mu, mu, photons: int) -> float:
    return sum(p * math.exp(-m) * m**photons for p, m in zip(p_mu, mu)) / math.factorial(photons)


def _vacuum_and_single(counts, p_mu, mu, dev: float, tau0: float, tau1: float):
    mu1, mu2, mu3 = mu
    s1_, s2_, s3_ = (math.exp(m) / p for m, p in zip(mu, p_mu))
    n1, n2, n3 = counts
    s0 = max(tau0 * (mu2 * s3_ * (n3 - dev) - mu3 * s2_ * (n2 + dev)) / (mu2 - mu3), 0.0)
    denom = mu1 * (mu2 - mu3) - mu2**2 + mu3**2
    s1 = tau1 * mu1 * (
        s2_ * (n2 - dev) - s3_ * (n3 + dev)
        - (mu2**2 - mu3**2) / mu1**2 * (s1_ * (n1 + dev) - s0 / tau0)
    ) / denom
    return s0, max(s1, 0.0)


def _bounds(nx, nz, mz, p_mu, mu, eps: float, deviations: bool):
    tau0 = _tau(p_mu, mu, 0)
    tau1 = _tau(p_mu, mu, 1)
    n_x = nx[0] + nx[1] + nx[2]
    n_z = nz[0] + nz[1] + nz[2]
    m_z = mz[0] + mz[1] + mz[2]
    if deviations:
        dev_x, dev_z, dev_m = (hoeffding_deviation(v, eps) for v in (n_x, n_z, m_z))
    else:
        dev_x = dev_z = dev_m = 0.0
    s_x0, s_x1 = _vacuum_and_single(nx, p_mu, mu, dev_x, tau0, tau1)
    s_z0, s_z1 = _vacuum_and_single(nz, p_mu, mu, dev_z, tau0, tau1)

    mu2, mu3 = mu[1], mu[2]
    m_hi2 = math.exp(mu2) / p_mu[1] * (mz[1] + dev_m)
    m_lo3 = math.exp(mu3) / p_mu[2] * (mz[2] - dev_m)
    v_z1 = max(tau1 * (m_hi2 - m_lo3) / (mu2 - mu3), 0.0)

    s_x0 = min(s_x0, n_x)
    s_x1 = min(s_x1, n_x - s_x0)
    if not (s_x1 > 0 and s_z1 > 0):
        return DecoyBounds(s_x0, s_x1, s_z0, s_z1, v_z1, 0.5, False)
    rate = min(v_z1 / s_z1, 0.5)
    phi = rate + (sampling_correction(eps, rate, s_z1, s_x1) if deviations else 0.0)
    return DecoyBounds(s_x0, s_x1, s_z0, s_z1, v_z1, min(max(phi, 0.0), 0.5), True)


def decoy_bounds(block: BlockCounts, params: ProtocolParams, security: SecurityParams,
                 deviations: bool = True) -> DecoyBounds:
    """Lower bounds on vacuum and single-photon X events and an upper bound on their phase error.

    ``deviations=False`` drops every statistical fluctuation term and returns
    the asymptotic decoy estimates (used to check the estimators themselves).
    """
    n = block.n.tolist()
    return _bounds(n[X], n[Z], block.m[Z].tolist(), params.p_mu, params.mu,
                   security.epsilon_per_bound, deviations)


@functools.lru_cache(maxsize=64)
def _normal_quantile(prob: float) -> float:
    return float(special.ndtri(prob))


def binomial_quantile(prob: float, n: int, p: float) -> int:
    """Smallest ``k`` with ``P[Bin(n, p) <= k] >= prob``.

    A Cornish-Fisher estimate seeds a bracketed search on the exact CDF
    (regularised incomplete beta), so the result is exact at any ``n``.
    """
    n = int(n)
    if n <= 0:
        return 0
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must be in (0, 1), got {prob}")

    def cdf(k):
        return special.bdtr(k, n, p)

    sd = math.sqrt(n * p * (1.0 - p))
    if sd > 0:
        z = _normal_quantile(prob)
        guess = n * p + sd * (z + (z * z - 1.0) * (1.0 - 2.0 * p) / (6.0 * sd)) - 0.5
    else:
        guess = n * p
    k = min(max(int(math.floor(guess)), 0), n)

    # bracket: cdf(lo) < prob <= cdf(hi), with lo = -1 meaning "below support"
    if cdf(k) >= prob:
        hi, step = k, 1
        lo = k - step
        while lo >= 0 and cdf(lo) >= prob:
            hi = lo
            step *= 2
            lo = hi - step
        lo = max(lo, -1)
    else:
        lo, step = k, 1
        hi = k + step
        while hi < n and cdf(hi) < prob:
            lo = hi
            step *= 2
            hi = lo + step
        hi = min(hi, n)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cdf(mid) >= prob:
            hi = mid
        else:
            lo = mid
    return hi


def _clamped_qber(n_x: float, q: float) -> float:
    floor = 1.0 / n_x
    return min(max(q, floor), 0.5 - floor)


def error_correction_bits(n_x: float, q: float, epsilon_c: float) -> float:
    """Syndrome size for one-way reconciliation of ``n_x`` bits at error rate ``q``."""
    if n_x < 1:
        raise ValueError(f"n_x must be >= 1, got {n_x}")
    if not 0 <= q < 0.5:
        raise ValueError(f"q must be in [0, 0.5), got {q}")
    if n_x < 4:
        return 0.0
    q = _clamped_qber(n_x, q)
    llr = math.log2((1 - q) / q)
    quantile = binomial_quantile(epsilon_c, int(round(n_x)), 1 - q)
    value = (
        n_x * _h(q)
        + n_x * (1 - q) * llr
        - (quantile - 1) * llr
        - 0.5 * math.log2(n_x)
        - math.log2(1 / epsilon_c)
    )
    return max(value, 0.0)


def error_correction_bits_switched(n_x: float, q: float, epsilon_c: float,
                                   f_ec_floor: float = 1.05) -> float:
    """As :func:`error_correction_bits`, but never below ``f_ec_floor * n_x * h(q)``."""
    if f_ec_floor < 1:
        raise ValueError(f"f_ec_floor must be >= 1, got {f_ec_floor}")
    base = error_correction_bits(n_x, q, epsilon_c)
    q_eff = _clamped_qber(n_x, q) if n_x >= 4 else q
    return max(base, f_ec_floor * n_x * _h(q_eff))


@functools.lru_cache(maxsize=64)
def security_overhead_bits(security: SecurityParams) -> float:
    return 6.0 * math.log2(COMPOSITION_TERMS / security.epsilon_s) + math.log2(2.0 / security.epsilon_c)


def unfloored_key_length(s_x0: float, s_x1: float, phi_x: float, lambda_ec: float,
                         security: SecurityParams) -> float:
    """Key length before the floor; may be negative."""
    return s_x0 + s_x1 * (1.0 - _h(phi_x)) - lambda_ec - security_overhead_bits(security)


def secret_key_length(s_x0: float, s_x1: float, phi_x: float, lambda_ec: float,
                      security: SecurityParams) -> int:
    raw = unfloored_key_length(s_x0, s_x1, phi_x, lambda_ec, security)
    return int(math.floor(raw)) if raw > 0 else 0


def key_length_terms(nx, mx_total: float, nz, mz, p_mu, mu, security: SecurityParams,
                     f_ec_floor: float | None = None, deviations: bool = True):
    """Scalar core of :func:`skl`; returns ``(bounds, lambda_ec, qber, h(qber), raw_length)`` or None."""
    n_x = nx[0] + nx[1] + nx[2]
    if not n_x >= 1:
        return None
    q = min(mx_total / n_x, 0.5)
    if q >= 0.5:
        return None
    bounds = _bounds(nx, nz, mz, p_mu, mu, security.epsilon_per_bound, deviations)
    if f_ec_floor is None:
        lam = error_correction_bits(n_x, q, security.epsilon_c)
    else:
        lam = error_correction_bits_switched(n_x, q, security.epsilon_c, f_ec_floor)
    h_q = _h(_clamped_qber(n_x, q)) if n_x >= 4 else 0.0
    # raw stays finite on failure so a search still sees a slope
    raw = unfloored_key_length(bounds.s_x0, bounds.s_x1, bounds.phi_x, lam, security)
    return bounds, lam, q, h_q, raw


def skl(block: BlockCounts, params: ProtocolParams, security: SecurityParams,
        f_ec_floor: float | None = None, deviations: bool = True) -> KeyResult:
    """Secret key length and the intermediate quantities behind it.

    ``f_ec_floor`` switches on the reconciliation-efficiency floor; by
    default the plain binomial-quantile leakage estimate is used.
    """
    n = block.n.tolist()
    m = block.m.tolist()
    terms = key_length_terms(n[X], sum(m[X]), n[Z], m[Z], params.p_mu, params.mu, security,
                             f_ec_floor=f_ec_floor, deviations=deviations)
    return key_result(terms, block.n_x_total)


def key_result(terms, n_x: float) -> KeyResult:
    if terms is None:
        if n_x >= 1:
            return KeyResult(0, 0.0, 0.0, 0.5, 0.0, n_x, 0.5, float("nan"))
        return KeyResult.empty()
    bounds, lam, q, h_q, raw = terms
    ell = int(math.floor(raw)) if bounds.ok and raw > 0 else 0
    return KeyResult(
        skl_bits=ell,
        s_x0=bounds.s_x0,
        s_x1=bounds.s_x1,
        phi_x=bounds.phi_x,
        lambda_ec_bits=lam,
        n_x=n_x,
        qber=q,
        f_ec_estimate=lam / (n_x * h_q) if h_q > 0 else float("nan"),
        raw_length=raw,
        estimation_ok=bounds.ok,
    )
