"""Multi-pass studies built on single-pass optimisation.

Every campaign point is independent and deterministic, so the optional
process pool changes wall time only; results are gathered in grid order.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .counts import ProtocolParams
from .finitekey import KeyResult
from .io_config import SystemConfig
from .optimize import OptimizationResult, OptimizationSpec, PassEvaluator, optimize_evaluator
from .orbit import (
    OrbitSpec, OutOfFootprintError, OverpassSpec, PassTrace, footprint_offset, pass_trace,
    _elevation_from_central_angle,
)

log = logging.getLogger("satqkd")

BITS_PER_BYTE = 8
FIXABLE = ("p_x_b", "mu1", "mu2")


# --- single geometry ----------------------------------------------------------------


@dataclass(frozen=True)
class PassPoint:
    d_min_m: float
    theta_max_deg: float
    skl_bits: int
    params: ProtocolParams | None = None
    key: KeyResult | None = None
    window_s: float = 0.0

    @property
    def delta_t_s(self) -> float:
        return self.params.delta_t_s if self.params is not None else 0.0


def _geometry(config: SystemConfig, theta_max_deg: float | None, d_min_m: float | None) -> OverpassSpec:
    return OverpassSpec(theta_max_deg=theta_max_deg, d_min_m=d_min_m,
                        theta_min_deg=config.theta_min_deg, time_step_s=config.time_step_s)


def trace_for(config: SystemConfig, theta_max_deg: float | None = None,
              d_min_m: float | None = None) -> PassTrace:
    return pass_trace(config.orbit, _geometry(config, theta_max_deg, d_min_m))


def evaluator_for(config: SystemConfig, trace: PassTrace, f_ec_floor: float | None = None,
                  true_mu=None) -> PassEvaluator:
    return PassEvaluator.build(trace, config.source, config.system, config.atmosphere,
                               config.security, f_ec_floor=f_ec_floor, true_mu=true_mu)


def _peak_elevation(config: SystemConfig, d_min_m: float) -> float:
    beta = d_min_m / config.orbit.earth_radius_m
    return math.degrees(float(_elevation_from_central_angle(beta, config.orbit)))


def _point(trace: PassTrace, result: OptimizationResult, evaluator: PassEvaluator) -> PassPoint:
    window = len(evaluator._window(result.best_params.delta_t_s)) * trace.time_step_s
    return PassPoint(trace.d_min_m, trace.theta_max_deg, result.skl_bits, result.best_params,
                     result.best_key, window)


def optimize_geometry(config: SystemConfig, spec: OptimizationSpec, theta_max_deg: float | None = None,
                      d_min_m: float | None = None) -> PassPoint:
    """Optimised key for one pass; offsets outside the footprint give a zero point."""
    try:
        trace = trace_for(config, theta_max_deg, d_min_m)
    except OutOfFootprintError:
        return PassPoint(float(d_min_m), _peak_elevation(config, d_min_m), 0)
    ev = evaluator_for(config, trace, f_ec_floor=spec.f_ec_floor)
    return _point(trace, optimize_evaluator(ev, spec), ev)


# --- parallel map -----------------------------------------------------------------


def _map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        # map preserves input order, so reductions stay fixed-order
        return list(pool.map(fn, items, chunksize=1))


def _optimize_offset(args) -> PassPoint:
    config, spec, d = args
    return optimize_geometry(config, spec, d_min_m=d)


# --- d_min sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCurve:
    points: tuple[PassPoint, ...]

    def __post_init__(self):
        d = [p.d_min_m for p in self.points]
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("sweep points must have strictly ascending d_min")
        if any(p.skl_bits < 0 for p in self.points):
            raise ValueError("skl_bits must be >= 0")

    @property
    def d_min_m(self) -> np.ndarray:
        return np.array([p.d_min_m for p in self.points])

    @property
    def skl_bits(self) -> np.ndarray:
        return np.array([p.skl_bits for p in self.points], dtype=float)

    @property
    def footprint_edge_m(self) -> float:
        """Largest grid offset with a nonzero key (d+ of the key footprint); 0 if none."""
        nonzero = [p.d_min_m for p in self.points if p.skl_bits > 0]
        return max(nonzero) if nonzero else 0.0


def estimate_footprint_edge(config: SystemConfig, spec: OptimizationSpec | None = None,
                            rel_tol: float = 0.01) -> float:
    """Bisect for the largest offset with a nonzero key using a cheap search.

    Returns the geometric footprint edge when even a zenith pass gives no key.
    """
    coarse = (spec or OptimizationSpec()).with_(restarts=2, grid_points=8, xatol=1e-3)
    hi = footprint_offset(config.orbit, config.theta_min_deg)
    if optimize_geometry(config, coarse, d_min_m=0.0).skl_bits == 0:
        return hi
    lo = 0.0
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if optimize_geometry(config, coarse, d_min_m=mid).skl_bits > 0:
            lo = mid
        else:
            hi = mid
    return lo


def default_dmin_grid(config: SystemConfig, spec: OptimizationSpec | None = None,
                      points: int = 33) -> list[float]:
    """``points`` evenly spaced offsets from 0 to 1.1 times the estimated key-footprint edge."""
    edge = estimate_footprint_edge(config, spec)
    return [float(v) for v in np.linspace(0.0, 1.1 * edge, points)]


def sweep_dmin(config: SystemConfig, dmin_grid, opt_spec: OptimizationSpec, threads: int = 1) -> SweepCurve:
    grid = [float(d) for d in dmin_grid]
    points = _map(_optimize_offset, [(config, opt_spec, d) for d in grid], threads)
    return SweepCurve(tuple(points))


def skl_integral(curve: SweepCurve) -> float:
    """Twice the trapezoidal area under SKL(d_min), in bit metres."""
    if not curve.points:
        raise ValueError("empty sweep curve")
    if len(curve.points) == 1:
        return 0.0
    return 2.0 * float(integrate.trapezoid(curve.skl_bits, curve.d_min_m))


def annual_skl(skl_int: float, latitude_deg: float, orbit: OrbitSpec) -> float:
    """Expected bits per year for one station at ``latitude_deg``."""
    if not abs(latitude_deg) < 90.0:
        raise ValueError(f"|latitude| must be < 90, got {latitude_deg}")
    circumference = 2.0 * math.pi * orbit.earth_radius_m * math.cos(math.radians(latitude_deg))
    return orbit.orbits_per_year * skl_int / circumference


# --- fixed-parameter selection ------------------------------------------------------


@dataclass(frozen=True)
class FixedSelection:
    fixed_set: dict
    index: int
    d_min_m: float
    candidates: tuple[tuple[int, float, dict, float], ...]  # (j, d_min_j, F_j, SKL_int_j)
    full_curve: SweepCurve
    selected_curve: SweepCurve
    latitude_deg: float
    orbit: OrbitSpec = field(repr=False, default_factory=OrbitSpec)

    @property
    def annual_selected(self) -> float:
        return annual_skl(skl_integral(self.selected_curve), self.latitude_deg, self.orbit)

    @property
    def annual_full(self) -> float:
        return annual_skl(skl_integral(self.full_curve), self.latitude_deg, self.orbit)

    def annual_candidates(self) -> list[tuple[int, float]]:
        return [(j, annual_skl(s, self.latitude_deg, self.orbit)) for j, _, _, s in self.candidates]


def fixed_set_of(params: ProtocolParams) -> dict:
    return {"p_x_b": params.p_x_b, "mu1": params.mu[0], "mu2": params.mu[1]}


def _candidate_column(args):
    config, spec, d, fixed_sets = args
    try:
        trace = trace_for(config, d_min_m=d)
    except OutOfFootprintError:
        return [PassPoint(d, _peak_elevation(config, d), 0) for _ in fixed_sets]
    ev = evaluator_for(config, trace, f_ec_floor=spec.f_ec_floor)
    return [_point(trace, optimize_evaluator(ev, spec.with_(fixed=dict(f))), ev) for f in fixed_sets]


def select_fixed_params(config: SystemConfig, dmin_grid, opt_spec: OptimizationSpec,
                        candidate_spec: OptimizationSpec | None = None, latitude_deg: float = 55.9,
                        threads: int = 1, full_curve: SweepCurve | None = None) -> FixedSelection:
    """Pick {P_X^B, mu1, mu2} maximising the annual key.

    Candidate j takes the fixed values from the fully optimised point j; the
    whole curve is then re-optimised with them held fixed. Offsets where the
    unconstrained key is already zero are skipped, since fixing parameters
    cannot raise the optimum.
    """
    grid = [float(d) for d in dmin_grid]
    full = full_curve if full_curve is not None else sweep_dmin(config, grid, opt_spec, threads)
    if [p.d_min_m for p in full.points] != grid:
        raise ValueError("full_curve does not match dmin_grid")
    live = [i for i, p in enumerate(full.points) if p.skl_bits > 0]
    if not live:
        raise ValueError("empty key footprint: no grid offset yields a nonzero key")
    cand_spec = candidate_spec or opt_spec
    fixed_sets = [tuple(sorted(fixed_set_of(full.points[j].params).items())) for j in live]

    columns = _map(_candidate_column, [(config, cand_spec, grid[i], fixed_sets) for i in live], threads)
    by_point = dict(zip(live, columns))

    candidates = []
    curves = []
    for c, j in enumerate(live):
        pts = [by_point[i][c] if i in by_point else PassPoint(p.d_min_m, p.theta_max_deg, 0)
               for i, p in enumerate(full.points)]
        curve = SweepCurve(tuple(pts))
        curves.append(curve)
        candidates.append((j, grid[j], dict(fixed_sets[c]), skl_integral(curve)))
        log.info("candidate %d/%d: d_min=%.4g m SKL_int=%.6g bit m", c + 1, len(live), grid[j],
                 candidates[-1][3])
    # first maximum wins, so ties go to the smaller offset
    best = max(range(len(candidates)), key=lambda c: (candidates[c][3], -c))
    j, d, fixed, _ = candidates[best]
    return FixedSelection(fixed, j, d, tuple(candidates), full, curves[best], latitude_deg, config.orbit)


# --- source rate ----------------------------------------------------------------


@dataclass(frozen=True)
class SourceRatePoint:
    rate_hz: float
    skl_bits: int
    skl_per_pulse: float


@dataclass(frozen=True)
class SourceRateResult:
    points: tuple[SourceRatePoint, ...]
    critical_rate_hz: float  # math.inf when no rate on the grid gives a key
    bracketed: bool  # False when the key is already nonzero at the first grid rate


def _rate_point(config: SystemConfig, spec: OptimizationSpec, rate: float, theta_max_deg, d_min_m):
    cfg = config.with_source(rate_hz=rate)
    pt = optimize_geometry(cfg, spec, theta_max_deg=theta_max_deg, d_min_m=d_min_m)
    pulses = rate * pt.window_s
    return SourceRatePoint(rate, pt.skl_bits, pt.skl_bits / pulses if pulses > 0 else 0.0)


def _rate_task(args):
    return _rate_point(*args)


def source_rate_sweep(config: SystemConfig, fs_grid, opt_spec: OptimizationSpec,
                      theta_max_deg: float | None = 90.0, d_min_m: float | None = None,
                      rel_width: float = 0.01, threads: int = 1) -> SourceRateResult:
    """Key versus source rate, and the critical rate below which no key survives.

    ``skl_per_pulse`` normalises by the pulses sent in the chosen window.
    """
    grid = [float(f) for f in fs_grid]
    if not grid or any(f <= 0 for f in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("fs_grid must be positive and strictly ascending")
    if theta_max_deg is not None and d_min_m is not None:
        theta_max_deg = None
    points = _map(_rate_task, [(config, opt_spec, f, theta_max_deg, d_min_m) for f in grid], threads)
    first = next((i for i, p in enumerate(points) if p.skl_bits > 0), None)
    if first is None:
        return SourceRateResult(tuple(points), math.inf, False)
    if first == 0:
        return SourceRateResult(tuple(points), grid[0], False)
    lo, hi = grid[first - 1], grid[first]
    while hi / lo > 1.0 + rel_width:
        mid = math.sqrt(lo * hi)
        if _rate_point(config, opt_spec, mid, theta_max_deg, d_min_m).skl_bits > 0:
            hi = mid
        else:
            lo = mid
    return SourceRateResult(tuple(points), hi, True)


# --- random-bit buffer -----------------------------------------------------------


@dataclass(frozen=True)
class BufferSpec:
    buffer_bytes: float
    bits_per_pulse_stored: int = 4

    def __post_init__(self):
        if not self.buffer_bytes >= 0:
            raise ValueError(f"buffer_bytes must be >= 0, got {self.buffer_bytes}")
        if self.bits_per_pulse_stored < 1:
            raise ValueError("bits_per_pulse_stored must be >= 1")

    def max_transmission_s(self, rate_hz: float) -> float:
        return transmission_time_s(self.buffer_bytes, rate_hz, self.bits_per_pulse_stored)


def transmission_time_s(buffer_bytes: float, rate_hz: float, bits_per_pulse: int = 4) -> float:
    """Seconds of transmission a buffer of random bits can feed."""
    return buffer_bytes * BITS_PER_BYTE / (bits_per_pulse * rate_hz)


def storage_bytes(window_s: float, rate_hz: float, bits_per_pulse: int = 4) -> float:
    """Random-bit storage consumed by ``window_s`` of transmission."""
    return rate_hz * window_s * bits_per_pulse / BITS_PER_BYTE


@dataclass(frozen=True)
class BufferResult:
    skl_bits: int
    t_max_s: float
    point: PassPoint


def buffer_spec_for(opt_spec: OptimizationSpec, t_max_s: float) -> OptimizationSpec:
    cap = t_max_s / 2.0
    if opt_spec.delta_t_cap_s is not None:
        cap = min(cap, opt_spec.delta_t_cap_s)
    grid = opt_spec.delta_t_grid
    if grid is not None:
        grid = tuple(v for v in grid if v <= cap + 1e-9) or None
    return opt_spec.with_(delta_t_cap_s=cap, delta_t_grid=grid)


def buffer_constraints(config: SystemConfig, buffer: BufferSpec, opt_spec: OptimizationSpec,
                       theta_max_deg: float | None = None, d_min_m: float | None = None) -> BufferResult:
    """Optimised key when transmission is limited to what the buffer can feed."""
    t_max = buffer.max_transmission_s(config.source.rate_hz)
    geom_d = d_min_m if d_min_m is not None else 0.0
    if t_max < config.time_step_s:
        # not enough random bits for a single time slot
        theta = theta_max_deg if theta_max_deg is not None else _peak_elevation(config, geom_d)
        return BufferResult(0, t_max, PassPoint(geom_d, theta, 0))
    pt = optimize_geometry(config, buffer_spec_for(opt_spec, t_max), theta_max_deg, d_min_m)
    return BufferResult(pt.skl_bits, t_max, pt)


def buffered_sweep(config: SystemConfig, buffer: BufferSpec, dmin_grid, opt_spec: OptimizationSpec,
                   threads: int = 1) -> SweepCurve:
    t_max = buffer.max_transmission_s(config.source.rate_hz)
    if t_max < config.time_step_s:
        return SweepCurve(tuple(PassPoint(float(d), _peak_elevation(config, float(d)), 0) for d in dmin_grid))
    return sweep_dmin(config, dmin_grid, buffer_spec_for(opt_spec, t_max), threads)


@dataclass(frozen=True)
class MinBuffer:
    feasible: bool
    t_min_s: float
    buffer_bytes: float


def min_buffer(config: SystemConfig, opt_spec: OptimizationSpec, theta_max_deg: float | None = None,
               d_min_m: float | None = None, bits_per_pulse: int = 4) -> MinBuffer:
    """Smallest whole-second half-window with a nonzero key, as a storage requirement.

    The total window is t_min = 2 dt; storage is f_s t_min bits_per_pulse / 8 bytes.
    """
    try:
        trace = trace_for(config, theta_max_deg, d_min_m)
    except OutOfFootprintError:
        return MinBuffer(False, math.inf, math.inf)
    ev = evaluator_for(config, trace, f_ec_floor=opt_spec.f_ec_floor)
    step = trace.time_step_s

    def has_key(dt: float) -> bool:
        spec = opt_spec.with_(delta_t_grid=(dt,), delta_t_cap_s=None)
        return optimize_evaluator(ev, spec).skl_bits > 0

    top = math.floor(trace.half_duration_s / step + 1e-9)
    if not has_key(top * step):
        return MinBuffer(False, math.inf, math.inf)
    lo, hi = -1, top  # has_key(hi * step) holds; lo is below every window
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if has_key(mid * step):
            hi = mid
        else:
            lo = mid
    t_min = 2.0 * hi * step
    return MinBuffer(True, t_min, storage_bytes(t_min, config.source.rate_hz, bits_per_pulse))


# --- intensity uncertainty ------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintySpec:
    fraction: float
    grid_points_per_intensity: int = 3

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError(f"fraction must be in [0, 1), got {self.fraction}")
        g = self.grid_points_per_intensity
        if g < 1:
            raise ValueError("grid_points_per_intensity must be >= 1")
        if self.fraction > 0.0 and g < 2:
            raise ValueError("grid_points_per_intensity must be >= 2 when fraction > 0")

    def offsets(self) -> list[float]:
        if self.fraction == 0.0:
            return [0.0]
        return [float(v) for v in np.linspace(-self.fraction, self.fraction, self.grid_points_per_intensity)]


@dataclass(frozen=True)
class UncertaintyResult:
    skl_bits: int
    nominal_skl_bits: int
    corners: tuple[tuple[float, float, int], ...]  # (delta_1, delta_2, skl)


def true_intensity_grid(mu, uspec: UncertaintySpec):
    """Emitted intensities mu_j (1 + delta_j) for j = 1, 2; vacuum stays exact."""
    offs = uspec.offsets()
    for d1, d2 in itertools.product(offs, offs):
        yield d1, d2, (mu[0] * (1.0 + d1), mu[1] * (1.0 + d2), mu[2])


def worst_case_key(evaluator: PassEvaluator, params: ProtocolParams, uspec: UncertaintySpec) -> UncertaintyResult:
    nominal = evaluator.key(params).skl_bits
    corners = []
    saved = evaluator.true_mu
    try:
        for d1, d2, mu_true in true_intensity_grid(params.mu, uspec):
            evaluator.true_mu = None if (d1 == 0.0 and d2 == 0.0) else mu_true
            corners.append((d1, d2, evaluator.key(params).skl_bits))
    finally:
        evaluator.true_mu = saved
    worst = min(s for _, _, s in corners)
    return UncertaintyResult(worst, nominal, tuple(corners))


def uncertainty_worstcase(config: SystemConfig, params: ProtocolParams, uspec: UncertaintySpec,
                          theta_max_deg: float | None = None, d_min_m: float | None = None) -> UncertaintyResult:
    """Smallest key over the grid of true intensities; bounds still assume the nominal ones."""
    try:
        trace = trace_for(config, theta_max_deg, d_min_m)
    except OutOfFootprintError:
        return UncertaintyResult(0, 0, ())
    return worst_case_key(evaluator_for(config, trace), params, uspec)


def _uncertain_point(args) -> PassPoint:
    config, point, uspec = args
    if point.params is None or point.skl_bits == 0:
        return PassPoint(point.d_min_m, point.theta_max_deg, 0)
    res = uncertainty_worstcase(config, point.params, uspec, d_min_m=point.d_min_m)
    return PassPoint(point.d_min_m, point.theta_max_deg, res.skl_bits, point.params, None, point.window_s)


def uncertainty_sweep(config: SystemConfig, curve: SweepCurve, uspec: UncertaintySpec,
                      threads: int = 1) -> SweepCurve:
    """Worst-case key at every point of ``curve``, keeping each point's parameters."""
    return SweepCurve(tuple(_map(_uncertain_point, [(config, p, uspec) for p in curve.points], threads)))
