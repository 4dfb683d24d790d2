"""Expected detection statistics for a transmission window.

Everything here is an expectation value; nothing is sampled.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .link import AtmosphereModel, OpticalSystem, db_to_fraction, trace_loss_db
from .orbit import PassTrace

X, Z = 0, 1


@dataclass(frozen=True)
class SourceSpec:
    rate_hz: float = 500e6
    intrinsic_qber: float = 0.005
    extraneous_count_prob: float = 5e-7
    afterpulse_prob: float = 0.001

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be > 0, got {self.rate_hz}")
        if not 0 <= self.intrinsic_qber < 0.5:
            raise ValueError(f"intrinsic_qber must be in [0, 0.5), got {self.intrinsic_qber}")
        if not 0 <= self.extraneous_count_prob < 0.5:
            raise ValueError(
                f"extraneous_count_prob must be in [0, 0.5), got {self.extraneous_count_prob}"
            )
        if not 0 <= self.afterpulse_prob < 1:
            raise ValueError(f"afterpulse_prob must be in [0, 1), got {self.afterpulse_prob}")


@dataclass(frozen=True)
class ProtocolParams:
    """Basis biases, intensity mix and half-window of one transmission block.

    ``mu`` is (signal, decoy, vacuum); the vacuum intensity must be zero.
    """

    p_x_a: float = 0.8
    p_x_b: float = 0.84
    p_mu: tuple[float, float, float] = (0.7, 0.2, 0.1)
    mu: tuple[float, float, float] = (0.71, 0.14, 0.0)
    delta_t_s: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "p_mu", tuple(float(p) for p in self.p_mu))
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        if len(self.p_mu) != 3 or len(self.mu) != 3:
            raise ValueError("p_mu and mu must have three entries")

    def problems(self) -> list[str]:
        """Violated invariants, empty when the parameters are usable."""
        out = []
        m1, m2, m3 = self.mu
        if not 0 < self.p_x_a < 1:
            out.append("p_x_a must be in (0, 1)")
        if not 0 < self.p_x_b < 1:
            out.append("p_x_b must be in (0, 1)")
        if any(not p > 0 for p in self.p_mu):
            out.append("p_mu entries must be > 0")
        if abs(sum(self.p_mu) - 1.0) > 1e-9:
            out.append("p_mu must sum to 1")
        if m3 != 0.0:
            out.append("mu3 must be 0 (vacuum)")
        if not m2 > m3:
            out.append("mu2 must exceed mu3")
        if not m1 > m2 + m3:
            out.append("mu1 must exceed mu2 + mu3")
        if not self.delta_t_s >= 0:
            out.append("delta_t_s must be >= 0")
        return out

    def with_(self, **changes) -> "ProtocolParams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class BlockCounts:
    """Sifted counts ``n[basis, k]`` and sifted errors ``m[basis, k]`` (basis 0 = X, 1 = Z)."""

    n: np.ndarray
    m: np.ndarray
    pulses_sent: float
    delta_t_s: float
    window_truncated: bool = False
    samples: int = 0

    def __post_init__(self):
        self.n.setflags(write=False)
        self.m.setflags(write=False)

    @property
    def n_x_total(self) -> float:
        return float(self.n[X].sum())

    @property
    def m_x_total(self) -> float:
        return float(self.m[X].sum())

    @property
    def n_z_total(self) -> float:
        return float(self.n[Z].sum())

    @property
    def m_z_total(self) -> float:
        return float(self.m[Z].sum())

    def scaled(self, factor: float) -> "BlockCounts":
        return replace(self, n=self.n * factor, m=self.m * factor, pulses_sent=self.pulses_sent * factor)


class UndefinedQBERError(ValueError):
    pass


def slot_statistics(mu_k, eta, source: SourceSpec):
    """Per-pulse click and error probabilities for intensity ``mu_k`` and channel transmittance ``eta``.

    Two-detector model: a vacuum slot clicks with probability ``2 p_ec`` and
    half of those clicks are errors. After-pulsing inflates both by ``1 + p_ap``.
    """
    p_ec = source.extraneous_count_prob
    p_ap = source.afterpulse_prob
    no_signal = np.exp(-np.multiply(mu_k, eta))
    detect = (1.0 - (1.0 - 2.0 * p_ec) * no_signal) * (1.0 + p_ap)
    error = (p_ec + source.intrinsic_qber * (1.0 - no_signal)) * (1.0 + p_ap)
    detect = np.clip(detect, 0.0, 1.0)
    error = np.minimum(np.clip(error, 0.0, 1.0), detect)
    if np.ndim(detect) == 0:
        return float(detect), float(error)
    return detect, error


def trace_transmittance(trace: PassTrace, system: OpticalSystem,
                        atmosphere: AtmosphereModel) -> np.ndarray:
    """Linear channel transmittance at every sample of ``trace``."""
    return db_to_fraction(trace_loss_db(trace, system, atmosphere))


def window_mask(trace: PassTrace, delta_t_s: float) -> tuple[np.ndarray, bool]:
    half = trace.half_duration_s
    truncated = delta_t_s > half + 1e-9
    return np.abs(trace.t_s) <= min(delta_t_s, half) + 1e-9, truncated


def accumulate_from_transmittance(eta: np.ndarray, trace: PassTrace, params: ProtocolParams,
                                  source: SourceSpec) -> BlockCounts:
    mask, truncated = window_mask(trace, params.delta_t_s)
    eta_w = eta[mask]
    pulses_per_slot = source.rate_hz * trace.time_step_s
    n = np.zeros((2, 3))
    m = np.zeros((2, 3))
    sift_x = params.p_x_a * params.p_x_b
    sift_z = (1.0 - params.p_x_a) * (1.0 - params.p_x_b)
    for k, (p_k, mu_k) in enumerate(zip(params.p_mu, params.mu)):
        d, e = slot_statistics(mu_k, eta_w, source)
        # np.sum over a time-ordered array: fixed reduction order
        d_sum = float(np.sum(d))
        e_sum = float(np.sum(e))
        base = pulses_per_slot * p_k
        n[X, k] = base * sift_x * d_sum
        n[Z, k] = base * sift_z * d_sum
        m[X, k] = base * sift_x * e_sum
        m[Z, k] = base * sift_z * e_sum
    return BlockCounts(
        n=n,
        m=m,
        pulses_sent=pulses_per_slot * int(mask.sum()),
        delta_t_s=params.delta_t_s,
        window_truncated=truncated,
        samples=int(mask.sum()),
    )


def accumulate_block(trace: PassTrace, params: ProtocolParams, source: SourceSpec,
                     system: OpticalSystem, atmosphere: AtmosphereModel) -> BlockCounts:
    """Expected sifted counts over ``[-delta_t, +delta_t]``.

    A window longer than the pass is clipped to the available samples and
    flagged through ``window_truncated``.
    """
    if len(trace) == 0:
        raise ValueError("empty pass trace")
    eta = trace_transmittance(trace, system, atmosphere)
    return accumulate_from_transmittance(eta, trace, params, source)


def qber(block: BlockCounts) -> float:
    if not block.n_x_total > 0:
        raise UndefinedQBERError("QBER undefined for a block without X-basis counts")
    return min(max(block.m_x_total / block.n_x_total, 0.0), 1.0)
