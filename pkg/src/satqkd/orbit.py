"""Overpass geometry for a circular orbit over a single ground station.

Spherical Earth, great-circle ground track, Earth rotation neglected.
Angles are degrees at the public interface and radians internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SECONDS_PER_YEAR = 365.25 * 86400.0


class OutOfFootprintError(ValueError):
    """Ground-track offset too large: the pass never rises above the elevation limit."""


@dataclass(frozen=True)
class OrbitSpec:
    altitude_m: float = 500e3
    earth_radius_m: float = 6371e3
    gravitational_parameter_m3s2: float = 3.986004418e14

    def __post_init__(self):
        if not self.altitude_m > 0:
            raise ValueError(f"altitude_m must be > 0, got {self.altitude_m}")
        if not self.earth_radius_m > 0:
            raise ValueError(f"earth_radius_m must be > 0, got {self.earth_radius_m}")
        if not self.gravitational_parameter_m3s2 > 0:
            raise ValueError("gravitational_parameter_m3s2 must be > 0")

    @property
    def orbit_radius_m(self) -> float:
        return self.earth_radius_m + self.altitude_m

    @property
    def angular_rate(self) -> float:
        """Mean motion in rad/s."""
        return math.sqrt(self.gravitational_parameter_m3s2 / self.orbit_radius_m**3)

    @property
    def period_s(self) -> float:
        return 2.0 * math.pi / self.angular_rate

    @property
    def orbits_per_year(self) -> float:
        return SECONDS_PER_YEAR / self.period_s


@dataclass(frozen=True)
class OverpassSpec:
    """One overpass, given either by its peak elevation or by its ground-track offset.

    Exactly one of ``theta_max_deg`` and ``d_min_m`` must be set.
    """

    theta_max_deg: float | None = None
    d_min_m: float | None = None
    theta_min_deg: float = 10.0
    time_step_s: float = 1.0

    def __post_init__(self):
        if (self.theta_max_deg is None) == (self.d_min_m is None):
            raise ValueError("exactly one of theta_max_deg and d_min_m must be given")
        if not self.time_step_s > 0:
            raise ValueError(f"time_step_s must be > 0, got {self.time_step_s}")
        if not 0.0 <= self.theta_min_deg < 90.0:
            raise ValueError(f"theta_min_deg must be in [0, 90), got {self.theta_min_deg}")
        if self.theta_max_deg is not None and not self.theta_min_deg < self.theta_max_deg <= 90.0:
            raise ValueError(
                f"theta_max_deg must be in (theta_min_deg, 90], got {self.theta_max_deg}"
            )
        if self.d_min_m is not None and self.d_min_m < 0:
            raise ValueError(f"d_min_m must be >= 0, got {self.d_min_m}")

    def resolve(self, orbit: OrbitSpec) -> tuple[float, float]:
        """Return ``(theta_max_deg, d_min_m)`` for this pass."""
        if self.theta_max_deg is not None:
            return self.theta_max_deg, offset_from_theta_max(self.theta_max_deg, orbit)
        theta = theta_max_from_offset(self.d_min_m, orbit, theta_min_deg=self.theta_min_deg)
        return theta, self.d_min_m


@dataclass(frozen=True, eq=False)
class PassTrace:
    """Sampled overpass. Time is relative to culmination."""

    t_s: np.ndarray
    elevation_rad: np.ndarray
    range_m: np.ndarray
    theta_max_deg: float
    d_min_m: float
    time_step_s: float
    duration_s: float = field(default=0.0)

    def __post_init__(self):
        for arr in (self.t_s, self.elevation_rad, self.range_m):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.t_s)

    @property
    def half_duration_s(self) -> float:
        return float(self.t_s[-1])


def _elevation_from_central_angle(beta, orbit: OrbitSpec):
    ratio = orbit.earth_radius_m / orbit.orbit_radius_m
    return np.arctan2(np.cos(beta) - ratio, np.sin(beta))


def _central_angle_from_elevation(theta_rad, orbit: OrbitSpec):
    ratio = orbit.earth_radius_m / orbit.orbit_radius_m
    return np.arccos(ratio * np.cos(theta_rad)) - theta_rad


def footprint_offset(orbit: OrbitSpec, theta_min_deg: float = 10.0) -> float:
    """Largest ground-track offset whose pass still reaches ``theta_min_deg``."""
    return offset_from_theta_max(theta_min_deg, orbit)


def theta_max_from_offset(d_min_m: float, orbit: OrbitSpec, theta_min_deg: float = 10.0) -> float:
    """Peak elevation (deg) of a pass whose ground track misses the station by ``d_min_m``."""
    if d_min_m < 0:
        raise ValueError(f"d_min_m must be >= 0, got {d_min_m}")
    beta = d_min_m / orbit.earth_radius_m
    theta = math.degrees(float(_elevation_from_central_angle(beta, orbit)))
    if d_min_m > 0 and theta <= theta_min_deg:
        raise OutOfFootprintError(
            f"offset {d_min_m:.6g} m gives theta_max {theta:.4f} deg <= theta_min {theta_min_deg} deg"
        )
    return theta


def offset_from_theta_max(theta_max_deg: float, orbit: OrbitSpec) -> float:
    if not 0.0 <= theta_max_deg <= 90.0:
        raise ValueError(f"theta_max_deg must be in [0, 90], got {theta_max_deg}")
    if theta_max_deg == 90.0:
        return 0.0
    beta = float(_central_angle_from_elevation(math.radians(theta_max_deg), orbit))
    return max(beta, 0.0) * orbit.earth_radius_m


def slant_range(elevation_rad, orbit: OrbitSpec):
    """Station-to-satellite distance (m) at the given elevation."""
    re = orbit.earth_radius_m
    rs = orbit.orbit_radius_m
    s = np.sin(elevation_rad)
    out = np.sqrt(rs**2 - re**2 * np.cos(elevation_rad) ** 2) - re * s
    return float(out) if np.ndim(out) == 0 else out


def pass_duration(orbit: OrbitSpec, overpass: OverpassSpec) -> float:
    """Continuous time above ``theta_min`` (s)."""
    theta_max, d_min = overpass.resolve(orbit)
    return 2.0 * _edge_time(orbit, d_min, overpass.theta_min_deg)


def _edge_time(orbit: OrbitSpec, d_min_m: float, theta_min_deg: float) -> float:
    beta_min = d_min_m / orbit.earth_radius_m
    beta_edge = float(_central_angle_from_elevation(math.radians(theta_min_deg), orbit))
    c = math.cos(beta_edge) / math.cos(beta_min)
    if c >= 1.0:
        return 0.0
    return math.acos(c) / orbit.angular_rate


def pass_trace(orbit: OrbitSpec, overpass: OverpassSpec) -> PassTrace:
    theta_max, d_min = overpass.resolve(orbit)
    dt = overpass.time_step_s
    t_edge = _edge_time(orbit, d_min, overpass.theta_min_deg)
    n_half = int(math.floor(t_edge / dt + 1e-9))
    k = np.arange(-n_half, n_half + 1)
    t = k * dt
    beta_min = d_min / orbit.earth_radius_m
    cos_beta = math.cos(beta_min) * np.cos(orbit.angular_rate * np.abs(k) * dt)
    beta = np.arccos(np.clip(cos_beta, -1.0, 1.0))
    elev = _elevation_from_central_angle(beta, orbit)
    elev = np.maximum(elev, math.radians(overpass.theta_min_deg))
    return PassTrace(
        t_s=t.astype(float),
        elevation_rad=elev,
        range_m=np.asarray(slant_range(elev, orbit), dtype=float),
        theta_max_deg=theta_max,
        d_min_m=d_min,
        time_step_s=dt,
        duration_s=2.0 * t_edge,
    )
