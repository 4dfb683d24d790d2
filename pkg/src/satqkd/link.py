"""Downlink efficiency: diffraction + atmosphere + fixed intrinsic loss, all in dB."""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import integrate

from .orbit import OrbitSpec, slant_range


class NearFieldError(ValueError):
    pass


class AtmosphereDomainError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


class AtmosphereTableError(ValueError):
    pass


@dataclass(frozen=True)
class OpticalSystem:
    tx_diameter_m: float = 0.08
    rx_diameter_m: float = 0.70
    beam_waist_m: float = 0.04
    wavelength_m: float = 785e-9
    intrinsic_loss_db: float = 20.0

    def __post_init__(self):
        for name in ("tx_diameter_m", "rx_diameter_m", "beam_waist_m", "wavelength_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.beam_waist_m > self.tx_diameter_m:
            raise ValueError("beam_waist_m must not exceed tx_diameter_m")
        if self.intrinsic_loss_db < 0:
            raise ValueError(f"intrinsic_loss_db must be >= 0, got {self.intrinsic_loss_db}")

    @property
    def far_field_distance_m(self) -> float:
        return self.tx_diameter_m**2 / self.wavelength_m


@dataclass(frozen=True)
class AtmosphereModel:
    """Elevation-dependent transmissivity.

    ``mode="analytic"`` uses a cosecant air-mass law anchored at zenith;
    ``mode="table"`` interpolates linearly in transmissivity between
    tabulated elevations.
    """

    mode: str = "analytic"
    zenith_transmissivity: float = 10 ** (-0.06)
    table: tuple[tuple[float, float], ...] = ()
    min_elevation_deg: float = 5.0
    source: str | None = None

    def __post_init__(self):
        if self.mode not in ("analytic", "table"):
            raise ValueError(f"atmosphere mode must be 'analytic' or 'table', got {self.mode!r}")
        if self.mode == "analytic" and not 0 < self.zenith_transmissivity <= 1:
            raise ValueError("zenith_transmissivity must be in (0, 1]")
        if self.mode == "table":
            if len(self.table) < 2:
                raise ValueError("atmosphere table needs at least two rows")
            elev = [e for e, _ in self.table]
            trans = [t for _, t in self.table]
            if any(b <= a for a, b in zip(elev, elev[1:])):
                raise ValueError("atmosphere table elevations must be strictly increasing")
            if any(b < a for a, b in zip(trans, trans[1:])):
                raise ValueError("atmosphere transmissivity must be nondecreasing with elevation")
            if any(not 0 < t <= 1 for t in trans):
                raise ValueError("atmosphere transmissivity must lie in (0, 1]")

    @classmethod
    def from_table(cls, rows, source: str | None = None) -> "AtmosphereModel":
        return cls(mode="table", table=tuple((float(e), float(t)) for e, t in rows), source=source)

    @property
    def coverage_deg(self) -> float:
        if self.mode == "table":
            return self.table[0][0]
        return self.min_elevation_deg


def read_atmosphere_csv(path) -> AtmosphereModel:
    """Load an ``elevation_deg,transmissivity`` table."""
    path = Path(path)
    with path.open(newline="") as fh:
        return _parse_atmosphere(fh, str(path))


def builtin_atmosphere() -> AtmosphereModel:
    """Fixture table sampled from the analytic model at 1 deg resolution."""
    with resources.files("satqkd.data").joinpath("atmosphere_785nm.csv").open(newline="") as fh:
        return _parse_atmosphere(fh, "builtin")


def _parse_atmosphere(fh, source: str) -> AtmosphereModel:
    reader = csv.reader(fh)
    rows = []
    header_seen = False
    for lineno, row in enumerate(reader, start=1):
        if not row or row[0].lstrip().startswith("#"):
            continue
        if not header_seen:
            if [c.strip() for c in row] != ["elevation_deg", "transmissivity"]:
                raise AtmosphereTableError(
                    f"{source}:{lineno}: expected header 'elevation_deg,transmissivity'"
                )
            header_seen = True
            continue
        if len(row) != 2:
            raise AtmosphereTableError(f"{source}:{lineno}: expected 2 columns, got {len(row)}")
        try:
            rows.append((float(row[0]), float(row[1])))
        except ValueError as exc:
            raise AtmosphereTableError(f"{source}:{lineno}: {exc}") from None
    if not header_seen:
        raise AtmosphereTableError(f"{source}: missing header")
    try:
        return AtmosphereModel.from_table(rows, source=source)
    except ValueError as exc:
        raise AtmosphereTableError(f"{source}: {exc}") from None


def write_atmosphere_csv(model: AtmosphereModel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["elevation_deg", "transmissivity"])
        for e, t in model.table:
            w.writerow([f"{e:.9g}", f"{t:.12g}"])


def transmissivity(atmosphere: AtmosphereModel, elevation_rad):
    elev_deg = np.degrees(np.asarray(elevation_rad, dtype=float))
    if np.any(elev_deg < atmosphere.coverage_deg - 1e-9):
        raise AtmosphereDomainError(
            f"elevation {float(np.min(elev_deg)):.3f} deg below atmosphere coverage "
            f"{atmosphere.coverage_deg} deg"
        )
    if atmosphere.mode == "analytic":
        return atmosphere.zenith_transmissivity ** (1.0 / np.sin(np.radians(elev_deg)))
    xs = np.array([e for e, _ in atmosphere.table])
    ys = np.array([t for _, t in atmosphere.table])
    if np.any(elev_deg > xs[-1] + 1e-9):
        raise AtmosphereDomainError(f"elevation above atmosphere table coverage {xs[-1]} deg")
    return np.interp(elev_deg, xs, ys)


def atmospheric_loss_db(atmosphere: AtmosphereModel, elevation_rad):
    out = -10.0 * np.log10(transmissivity(atmosphere, elevation_rad))
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


# --- diffraction ------------------------------------------------------------
#
# Far field of E(r) = exp(-r^2/w0^2), r <= a, is the zero-order Hankel transform
#   U(rho) = (2 pi / (lambda z)) g(2 pi rho / (lambda z)),
#   g(u) = int_0^a E(r) J0(u r) r dr.
# With u as integration variable the collected power is
#   P_R = 2 pi int_0^{u_R} g(u)^2 u du,  u_R = pi R_X / (lambda z),
# so the collection ratio depends on range only through u_R.

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _aperture_transform(u, aperture_radius: float, waist: float):
    """g(u) for an array of u, by Gauss-Legendre on [0, a]."""
    from scipy.special import j0

    u = np.atleast_1d(np.asarray(u, dtype=float))
    # nodes scale with the number of J0 oscillations across the aperture
    n = 48 + 8 * int(math.ceil(float(np.max(u)) * aperture_radius / math.pi))
    x, w = _gauss_legendre(n)
    r = 0.5 * aperture_radius * (x + 1.0)
    wr = 0.5 * aperture_radius * w * r * np.exp(-(r**2) / waist**2)
    return j0(np.outer(u, r)) @ wr


def transmitted_power(system: OpticalSystem) -> float:
    a = system.tx_diameter_m / 2
    w0 = system.beam_waist_m
    # int_0^a exp(-2 r^2 / w0^2) 2 pi r dr
    return 0.5 * math.pi * w0**2 * (1.0 - math.exp(-2.0 * a**2 / w0**2))


def _collected_power(system: OpticalSystem, u_r: float, rtol: float = 1e-6) -> float:
    a = system.tx_diameter_m / 2
    w0 = system.beam_waist_m

    def integrand(u):
        return float(_aperture_transform(u, a, w0)[0] ** 2) * u

    # split at the J0 zeros of the aperture edge to keep quad well behaved
    step = math.pi / a
    edges = [0.0]
    while edges[-1] + step < u_r:
        edges.append(edges[-1] + step)
    edges.append(u_r)
    total = 0.0
    for lo, hi in zip(edges, edges[1:]):
        val, err = integrate.quad(integrand, lo, hi, epsrel=rtol, epsabs=0.0, limit=200)
        if not np.isfinite(val) or err > max(1e-3 * abs(val), 1e-300) * 10:
            raise QuadratureError(
                f"receiver-disc quadrature did not converge on [{lo:.4g}, {hi:.4g}]: "
                f"value={val:.6g}, error estimate={err:.3g}"
            )
        total += val
    return 2.0 * math.pi * total


def collection_ratio(system: OpticalSystem, range_m: float) -> float:
    """P_R / P_T for a receiver disc at ``range_m``."""
    if not range_m >= 10.0 * system.far_field_distance_m:
        raise NearFieldError(
            f"range {range_m:.4g} m is not in the far field "
            f"(need >= {10.0 * system.far_field_distance_m:.4g} m)"
        )
    u_r = math.pi * system.rx_diameter_m / (system.wavelength_m * range_m)
    return _collected_power(system, u_r) / transmitted_power(system)


@functools.lru_cache(maxsize=65536)
def _diffraction_loss_cached(system: OpticalSystem, range_key: float) -> float:
    return -10.0 * math.log10(collection_ratio(system, range_key))


def diffraction_loss_db(system: OpticalSystem, range_m, cache: bool = True):
    """Diffraction loss (dB) at one range or an array of ranges.

    With ``cache`` the range is rounded to the nearest 1 mm before lookup.
    """
    ranges = np.asarray(range_m, dtype=float)
    if cache:
        fn = lambda r: _diffraction_loss_cached(system, round(float(r), 3))  # noqa: E731
    else:
        fn = lambda r: -10.0 * math.log10(collection_ratio(system, float(r)))  # noqa: E731
    if ranges.ndim == 0:
        return fn(ranges)
    return np.array([fn(r) for r in ranges.ravel()]).reshape(ranges.shape)


def far_field_total_power(system: OpticalSystem, u_max: float | None = None) -> float:
    """Far-field power integrated out to ``u_max`` (defaults to a wide disc); for sanity checks."""
    a = system.tx_diameter_m / 2
    if u_max is None:
        # neglected tail is about 0.2 / (u_max a) of P_T
        u_max = 200.0 / a
    return _collected_power(system, u_max)


def link_efficiency_db(system: OpticalSystem, atmosphere: AtmosphereModel, orbit: OrbitSpec, elevation_rad):
    """Total link loss (dB); larger means less light reaches the detector."""
    rng = slant_range(elevation_rad, orbit)
    return (
        diffraction_loss_db(system, rng)
        + atmospheric_loss_db(atmosphere, elevation_rad)
        + system.intrinsic_loss_db
    )


def trace_loss_db(trace, system: OpticalSystem, atmosphere: AtmosphereModel) -> np.ndarray:
    """Link loss (dB) at every sample of a pass trace, using its stored ranges."""
    return (
        diffraction_loss_db(system, trace.range_m)
        + atmospheric_loss_db(atmosphere, trace.elevation_rad)
        + system.intrinsic_loss_db
    )


def system_loss_db(system: OpticalSystem, atmosphere: AtmosphereModel, orbit: OrbitSpec) -> float:
    """Link loss at zenith."""
    return float(link_efficiency_db(system, atmosphere, orbit, math.pi / 2))


def db_to_fraction(loss_db):
    return 10.0 ** (-np.asarray(loss_db) / 10.0)
