"""Maximise the secret key length of one pass over the free protocol parameters.

The search runs a bounded downhill simplex from several quasi-random
starting points at each candidate half-window, and keeps the best point
overall. Ties resolve toward the earlier grid entry and earlier restart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sopt
from scipy.stats import qmc

from .counts import BlockCounts, ProtocolParams, SourceSpec, slot_statistics, trace_transmittance
from .finitekey import KeyResult, SecurityParams, key_length_terms, key_result
from .link import AtmosphereModel, OpticalSystem
from .orbit import PassTrace

PARAM_NAMES = ("p_x_a", "p_x_b", "p1", "p2", "mu1", "mu2")

DEFAULT_BOUNDS = {
    "p_x_a": (0.5, 0.99),
    "p_x_b": (0.01, 0.99),
    "p1": (0.01, 0.97),
    "p2": (0.01, 0.97),
    "mu1": (0.1, 1.0),
    "mu2": (0.01, 0.5),
}

MIN_VACUUM_PROB = 0.01


def feasible(params: ProtocolParams) -> bool:
    return not params.problems()


def delta_t_grid(half_duration_s: float, count: int = 24, start_s: float = 5.0,
                 cap_s: float | None = None, time_step_s: float = 1.0) -> list[float]:
    """Log-spaced half-windows from ``start_s`` up to the pass half-duration (or ``cap_s``).

    Values are snapped down to whole time steps and de-duplicated.
    """
    top = half_duration_s if cap_s is None else min(half_duration_s, cap_s)
    top = math.floor(top / time_step_s + 1e-9) * time_step_s
    if top <= 0:
        return [0.0]
    lo = min(start_s, top)
    raw = np.geomspace(lo, top, count) if count > 1 else np.array([top])
    snapped = sorted({math.floor(v / time_step_s + 1e-9) * time_step_s for v in raw} | {top})
    return [float(v) for v in snapped]


@dataclass(frozen=True)
class OptimizationSpec:
    fixed: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    delta_t_grid: tuple[float, ...] | None = None
    grid_points: int = 24
    restarts: int = 8
    seed: int = 42
    delta_t_cap_s: float | None = None
    warm_start: bool = True
    xatol: float = 1e-4
    max_evals: int = 2000
    f_ec_floor: float | None = None

    def __post_init__(self):
        unknown = set(self.fixed) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"cannot fix unknown parameters {sorted(unknown)}")
        for name, (lo, hi) in self.bounds.items():
            if name not in PARAM_NAMES:
                raise ValueError(f"bounds given for unknown parameter {name!r}")
            if not lo < hi:
                raise ValueError(f"bounds for {name} must satisfy lo < hi")
        if self.delta_t_grid is not None:
            grid = list(self.delta_t_grid)
            if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("delta_t_grid must be nonempty and strictly ascending")
            if self.delta_t_cap_s is not None and grid[-1] > self.delta_t_cap_s + 1e-9:
                raise ValueError("delta_t_grid exceeds delta_t_cap_s")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def free(self) -> tuple[str, ...]:
        return tuple(n for n in PARAM_NAMES if n not in self.fixed)

    def grid_for(self, trace: PassTrace) -> list[float]:
        if self.delta_t_grid is not None:
            grid = [min(v, trace.half_duration_s) for v in self.delta_t_grid]
            return sorted(set(grid))
        return delta_t_grid(trace.half_duration_s, self.grid_points, cap_s=self.delta_t_cap_s,
                            time_step_s=trace.time_step_s)

    def with_(self, **changes) -> "OptimizationSpec":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class OptimizationResult:
    best_params: ProtocolParams
    best_key: KeyResult
    evaluations: int
    converged: bool

    @property
    def skl_bits(self) -> int:
        return self.best_key.skl_bits


class PassEvaluator:
    """Key length of one pass as a function of protocol parameters.

    Detection sums over each window are memoised by (intensity, window),
    which makes repeated evaluations with fixed intensities cheap.
    """

    def __init__(self, trace: PassTrace, eta: np.ndarray, source: SourceSpec,
                 security: SecurityParams, f_ec_floor: float | None = None,
                 true_mu: tuple[float, float, float] | None = None):
        self.trace = trace
        self.eta = np.asarray(eta, dtype=float)
        self.source = source
        self.security = security
        self.f_ec_floor = f_ec_floor
        # intensities actually emitted; None means the nominal ones
        self.true_mu = true_mu
        self.evaluations = 0
        self._windows: dict[float, np.ndarray] = {}
        self._sums: dict[tuple[float, float], tuple[float, float]] = {}

    @classmethod
    def build(cls, trace: PassTrace, source: SourceSpec, system: OpticalSystem,
              atmosphere: AtmosphereModel, security: SecurityParams, **kw) -> "PassEvaluator":
        return cls(trace, trace_transmittance(trace, system, atmosphere), source, security, **kw)

    def _window(self, delta_t: float) -> np.ndarray:
        w = self._windows.get(delta_t)
        if w is None:
            half = min(delta_t, self.trace.half_duration_s)
            w = self.eta[np.abs(self.trace.t_s) <= half + 1e-9]
            self._windows[delta_t] = w
        return w

    def _detection_sums(self, mu: float, delta_t: float) -> tuple[float, float]:
        key = (mu, delta_t)
        got = self._sums.get(key)
        if got is None:
            w = self._window(delta_t)
            src = self.source
            gain = 1.0 + src.afterpulse_prob
            p_ec = src.extraneous_count_prob
            peak = (1.0 - (1.0 - 2.0 * p_ec) * math.exp(-mu * float(w.max()))) * gain if len(w) else 0.0
            if peak <= 1.0 and src.intrinsic_qber <= 1.0:
                # both sums are affine in sum(exp(-mu eta)) when nothing clips
                n = len(w)
                s = float(np.exp(-mu * w).sum())
                d_sum = (n - (1.0 - 2.0 * p_ec) * s) * gain
                e_sum = (p_ec * n + src.intrinsic_qber * (n - s)) * gain
                got = (d_sum, min(e_sum, d_sum))
            else:
                d, e = slot_statistics(mu, w, src)
                got = (float(np.sum(d)), float(np.sum(e)))
            if len(self._sums) > 4096:
                self._sums.clear()
            self._sums[key] = got
        return got

    def _lists(self, p_x_a, p_x_b, p_mu, mu, delta_t):
        slot = self.source.rate_hz * self.trace.time_step_s
        sift_x = p_x_a * p_x_b
        sift_z = (1.0 - p_x_a) * (1.0 - p_x_b)
        emitted = self.true_mu or mu
        nx, nz, mx, mz = [], [], [], []
        for k in range(3):
            d_sum, e_sum = self._detection_sums(emitted[k], delta_t)
            base = slot * p_mu[k]
            nx.append(base * sift_x * d_sum)
            nz.append(base * sift_z * d_sum)
            mx.append(base * sift_x * e_sum)
            mz.append(base * sift_z * e_sum)
        return nx, nz, mx, mz

    def block(self, params: ProtocolParams) -> BlockCounts:
        nx, nz, mx, mz = self._lists(params.p_x_a, params.p_x_b, params.p_mu, params.mu,
                                     params.delta_t_s)
        w = self._window(params.delta_t_s)
        return BlockCounts(
            n=np.array([nx, nz]), m=np.array([mx, mz]),
            pulses_sent=self.source.rate_hz * self.trace.time_step_s * len(w),
            delta_t_s=params.delta_t_s,
            window_truncated=params.delta_t_s > self.trace.half_duration_s + 1e-9,
            samples=len(w),
        )

    def terms(self, p_x_a, p_x_b, p_mu, mu, delta_t):
        self.evaluations += 1
        nx, nz, mx, mz = self._lists(p_x_a, p_x_b, p_mu, mu, delta_t)
        return key_length_terms(nx, mx[0] + mx[1] + mx[2], nz, mz, p_mu, mu, self.security,
                                f_ec_floor=self.f_ec_floor), nx[0] + nx[1] + nx[2]

    def key(self, params: ProtocolParams) -> KeyResult:
        terms, n_x = self.terms(params.p_x_a, params.p_x_b, params.p_mu, params.mu,
                                params.delta_t_s)
        return key_result(terms, n_x)


class _Coordinates:
    """Maps the unit box onto feasible protocol parameters.

    The simplex constraint ``p1 + p2 <= 1 - MIN_VACUUM_PROB`` and the
    ordering ``mu1 > mu2`` are absorbed by shrinking the range of the
    later coordinate, so every point of the box is feasible.
    """

    def __init__(self, spec: OptimizationSpec):
        self.fixed = dict(spec.fixed)
        self.free = spec.free
        self.bounds = {n: spec.bounds.get(n, DEFAULT_BOUNDS[n]) for n in PARAM_NAMES}

    def params(self, u, delta_t: float) -> ProtocolParams:
        p_x_a, p_x_b, p_mu, mu = self.values(u)
        return ProtocolParams(p_x_a=p_x_a, p_x_b=p_x_b, p_mu=p_mu, mu=mu, delta_t_s=delta_t)

    def values(self, u):
        vals = dict(self.fixed)
        free = {n: min(max(float(x), 0.0), 1.0) for n, x in zip(self.free, u)}

        def pick(name, lo, hi):
            if name in vals:
                return vals[name]
            lo0, hi0 = self.bounds[name]
            lo, hi = max(lo0, lo), min(hi0, hi)
            if hi < lo:
                hi = lo
            return lo + free[name] * (hi - lo)

        top = 1.0 - MIN_VACUUM_PROB
        vals["p_x_a"] = pick("p_x_a", 0.0, 1.0)
        vals["p_x_b"] = pick("p_x_b", 0.0, 1.0)
        p2_fixed = self.fixed.get("p2")
        vals["p1"] = pick("p1", 0.0, top - (p2_fixed if p2_fixed is not None else self.bounds["p2"][0]))
        vals["p2"] = pick("p2", 0.0, top - vals["p1"])
        mu2_fixed = self.fixed.get("mu2")
        vals["mu1"] = pick("mu1", (mu2_fixed or 0.0) * (1 + 1e-6), math.inf)
        vals["mu2"] = pick("mu2", 0.0, vals["mu1"] * (1 - 1e-6))
        p3 = 1.0 - vals["p1"] - vals["p2"]
        return (
            float(vals["p_x_a"]), float(vals["p_x_b"]),
            (float(vals["p1"]), float(vals["p2"]), float(p3)),
            (float(vals["mu1"]), float(vals["mu2"]), 0.0),
        )

    def unit(self, params: ProtocolParams) -> np.ndarray:
        """Approximate inverse of :meth:`params` (for warm starts)."""
        vals = {
            "p_x_a": params.p_x_a, "p_x_b": params.p_x_b,
            "p1": params.p_mu[0], "p2": params.p_mu[1],
            "mu1": params.mu[0], "mu2": params.mu[1],
        }
        top = 1.0 - MIN_VACUUM_PROB
        hi_override = {
            "p1": top - self.fixed.get("p2", self.bounds["p2"][0]),
            "p2": top - vals["p1"],
            "mu2": vals["mu1"] * (1 - 1e-6),
        }
        u = []
        for name in self.free:
            lo, hi = self.bounds[name]
            hi = min(hi, hi_override.get(name, hi))
            u.append(0.5 if hi <= lo else (vals[name] - lo) / (hi - lo))
        return np.clip(np.array(u), 0.0, 1.0)


def _rank(terms) -> tuple[int, float]:
    """Sort key: key length first, then the unfloored value."""
    if terms is None:
        return (0, -math.inf)
    bounds, _, _, _, raw = terms
    return (int(math.floor(raw)) if bounds.ok and raw > 0 else 0, raw)


def starting_points(dim: int, count: int, seed: int) -> np.ndarray:
    """Box centre followed by ``count - 1`` scrambled Halton points."""
    if dim == 0:
        return np.zeros((1, 0))
    centre = np.full((1, dim), 0.5)
    if count == 1:
        return centre
    return np.vstack([centre, qmc.Halton(d=dim, scramble=True, seed=seed).random(count - 1)])


def optimize_evaluator(evaluator: PassEvaluator, spec: OptimizationSpec) -> OptimizationResult:
    """Multi-start simplex search at every half-window of the grid.

    Restart ``k`` forms a chain across the grid: its search at each
    half-window starts from its own best point at the previous one, and
    again from its fixed starting point when that finds no key. Chains
    never share state, so adding restarts can only add candidates.
    """
    coords = _Coordinates(spec)
    dim = len(coords.free)
    starts = starting_points(dim, spec.restarts, spec.seed)
    grid = spec.grid_for(evaluator.trace)
    before = evaluator.evaluations
    bounds = [(0.0, 1.0)] * dim

    # every evaluated point competes, not only the simplex end points
    best = {"rank": (0, -math.inf), "u": None, "delta_t": grid[0]}
    converged = True
    chains: list[np.ndarray | None] = [None] * len(starts)

    for delta_t in grid:
        for k, start in enumerate(starts):
            local = {"rank": (0, -math.inf), "u": None}

            def f(u):
                terms, _ = evaluator.terms(*coords.values(u), delta_t)
                rank = _rank(terms)
                if rank > local["rank"]:
                    local["rank"], local["u"] = rank, np.array(u, dtype=float)
                return -rank[1] if math.isfinite(rank[1]) else 1e30

            if dim == 0:
                f(start)
            else:
                seeds = [start] if chains[k] is None or not spec.warm_start else [chains[k], start]
                for i, u0 in enumerate(seeds):
                    if i > 0 and local["rank"][0] > 0:
                        break
                    res = sopt.minimize(
                        f, u0, method="Nelder-Mead", bounds=bounds,
                        options={"xatol": spec.xatol, "fatol": 0.5, "maxfev": spec.max_evals,
                                 "initial_simplex": _initial_simplex(u0)},
                    )
                    converged &= bool(res.success)
            chains[k] = local["u"] if local["u"] is not None else np.array(start, dtype=float)
            if local["rank"] > best["rank"]:
                best.update(rank=local["rank"], u=local["u"], delta_t=delta_t)

    u = best["u"] if best["u"] is not None else np.array(starts[0], dtype=float)
    params = coords.params(u, best["delta_t"])
    key = evaluator.key(params)
    return OptimizationResult(
        best_params=params,
        best_key=key,
        evaluations=evaluator.evaluations - before,
        converged=converged,
    )


def _initial_simplex(u0: np.ndarray, step: float = 0.1) -> np.ndarray:
    dim = len(u0)
    simplex = np.tile(np.clip(u0, 0, 1), (dim + 1, 1))
    for i in range(dim):
        simplex[i + 1, i] += step if simplex[i + 1, i] + step <= 1 else -step
    return simplex


def optimize_pass(trace: PassTrace, spec: OptimizationSpec, source: SourceSpec,
                  system: OpticalSystem, atmosphere: AtmosphereModel,
                  security: SecurityParams) -> OptimizationResult:
    if len(trace) == 0:
        raise ValueError("empty pass trace")
    evaluator = PassEvaluator.build(trace, source, system, atmosphere, security,
                                    f_ec_floor=spec.f_ec_floor)
    return optimize_evaluator(evaluator, spec)
