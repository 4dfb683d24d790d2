"""Configuration files and result tables.

Configuration is TOML with five optional sections::

    [orbit]       altitude_m, earth_radius_m, gravitational_parameter_m3s2,
                  theta_min_deg, time_step_s
    [optics]      tx_diameter_m, rx_diameter_m, beam_waist_m, wavelength_m,
                  intrinsic_loss_db
    [source]      rate_hz, intrinsic_qber, extraneous_count_prob, afterpulse_prob
    [security]    epsilon_s, epsilon_c
    [atmosphere]  mode ("table" or "analytic"), table ("builtin" or a CSV path),
                  zenith_transmissivity, min_elevation_deg

Omitted keys take the reference-system defaults. Result tables are CSV
with a ``#`` metadata block, a header carrying units, and values written
to 9 significant digits.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from . import __version__
from .counts import SourceSpec
from .finitekey import SecurityParams
from .link import AtmosphereModel, OpticalSystem, builtin_atmosphere, read_atmosphere_csv, system_loss_db
from .orbit import OrbitSpec

log = logging.getLogger("satqkd")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 column: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line
        self.column = column


@dataclass(frozen=True)
class SystemConfig:
    orbit: OrbitSpec = field(default_factory=OrbitSpec)
    system: OpticalSystem = field(default_factory=OpticalSystem)
    source: SourceSpec = field(default_factory=SourceSpec)
    security: SecurityParams = field(default_factory=SecurityParams)
    atmosphere: AtmosphereModel = field(default_factory=builtin_atmosphere)
    theta_min_deg: float = 10.0
    time_step_s: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.theta_min_deg < 90.0:
            raise ConfigError(f"theta_min_deg must be in [0, 90), got {self.theta_min_deg}",
                              field="orbit.theta_min_deg")
        if not self.time_step_s > 0:
            raise ConfigError(f"time_step_s must be > 0, got {self.time_step_s}",
                              field="orbit.time_step_s")

    @property
    def zenith_loss_db(self) -> float:
        return system_loss_db(self.system, self.atmosphere, self.orbit)

    def with_source(self, **changes) -> "SystemConfig":
        from dataclasses import replace
        return replace(self, source=replace(self.source, **changes))

    def to_dict(self) -> dict:
        atm = self.atmosphere
        if atm.mode == "table":
            atm_section = {"mode": "table", "table": atm.source or "builtin"}
        else:
            atm_section = {
                "mode": "analytic",
                "zenith_transmissivity": atm.zenith_transmissivity,
                "min_elevation_deg": atm.min_elevation_deg,
            }
        orbit = asdict(self.orbit)
        orbit.update(theta_min_deg=self.theta_min_deg, time_step_s=self.time_step_s)
        return {
            "orbit": orbit,
            "optics": asdict(self.system),
            "source": asdict(self.source),
            "security": asdict(self.security),
            "atmosphere": atm_section,
        }

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        """Short content hash used to tag result files."""
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


_SECTIONS = {
    "orbit": ({f.name for f in fields(OrbitSpec)} | {"theta_min_deg", "time_step_s"}),
    "optics": {f.name for f in fields(OpticalSystem)},
    "source": {f.name for f in fields(SourceSpec)},
    "security": {f.name for f in fields(SecurityParams)},
    "atmosphere": {"mode", "table", "zenith_transmissivity", "min_elevation_deg"},
}


def _numbers(section: str, values: dict) -> dict:
    out = {}
    for key, v in values.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {v!r}", field=f"{section}.{key}")
        if not math.isfinite(v):
            raise ConfigError(f"{section}.{key} must be finite", field=f"{section}.{key}")
        out[key] = float(v)
    return out


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except ValueError as exc:
        msg = str(exc)
        name = next((k for k in sorted(values, key=len, reverse=True) if k in msg), None)
        if name is None:
            name = next((f.name for f in fields(cls) if f.name in msg), None)
        where = f"{section}.{name}" if name else section
        raise ConfigError(f"{where}: {msg}", field=where) from None


def _atmosphere(values: dict, base_dir: Path | None) -> AtmosphereModel:
    mode = values.get("mode", "table")
    if mode not in ("table", "analytic"):
        raise ConfigError(f"atmosphere.mode must be 'table' or 'analytic', got {mode!r}",
                          field="atmosphere.mode")
    if mode == "analytic":
        extra = set(values) & {"table"}
        if extra:
            raise ConfigError("atmosphere.table is only valid with mode = 'table'", field="atmosphere.table")
        nums = _numbers("atmosphere", {k: v for k, v in values.items() if k != "mode"})
        return _build(AtmosphereModel, "atmosphere", {"mode": "analytic", **nums})
    extra = set(values) & {"zenith_transmissivity", "min_elevation_deg"}
    if extra:
        name = sorted(extra)[0]
        raise ConfigError(f"atmosphere.{name} is only valid with mode = 'analytic'", field=f"atmosphere.{name}")
    table = values.get("table", "builtin")
    if not isinstance(table, str):
        raise ConfigError("atmosphere.table must be a string", field="atmosphere.table")
    if table == "builtin":
        return builtin_atmosphere()
    path = Path(table)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        model = read_atmosphere_csv(path)
    except OSError as exc:
        raise ConfigError(f"atmosphere.table: cannot read {path}: {exc.strerror}",
                          field="atmosphere.table") from None
    except ValueError as exc:
        raise ConfigError(f"atmosphere.table: {exc}", field="atmosphere.table") from None
    # keep the path as written so a dump reloads the same file
    return AtmosphereModel.from_table(model.table, source=str(path))


def config_from_dict(data: dict, base_dir: Path | None = None) -> SystemConfig:
    for section, values in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", field=section)
        if not isinstance(values, dict):
            raise ConfigError(f"{section} must be a table", field=section)
        unknown = set(values) - _SECTIONS[section]
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(f"unknown key {section}.{name}", field=f"{section}.{name}")

    orbit_vals = _numbers("orbit", data.get("orbit", {}))
    theta_min = orbit_vals.pop("theta_min_deg", 10.0)
    time_step = orbit_vals.pop("time_step_s", 1.0)
    cfg = SystemConfig(
        orbit=_build(OrbitSpec, "orbit", orbit_vals),
        system=_build(OpticalSystem, "optics", _numbers("optics", data.get("optics", {}))),
        source=_build(SourceSpec, "source", _numbers("source", data.get("source", {}))),
        security=_build(SecurityParams, "security", _numbers("security", data.get("security", {}))),
        atmosphere=_atmosphere(data.get("atmosphere", {}), base_dir),
        theta_min_deg=theta_min,
        time_step_s=time_step,
    )
    if cfg.atmosphere.coverage_deg > cfg.theta_min_deg:
        raise ConfigError(
            f"atmosphere covers elevations from {cfg.atmosphere.coverage_deg} deg, "
            f"above orbit.theta_min_deg = {cfg.theta_min_deg}",
            field="orbit.theta_min_deg",
        )
    return cfg


def loads_config(text: str, base_dir: Path | None = None) -> SystemConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line, col = getattr(exc, "lineno", None), getattr(exc, "colno", None)
        raise ConfigError(f"config parse error at line {line}, column {col}: {exc.msg}",
                          line=line, column=col) from None
    return config_from_dict(data, base_dir)


def load_config(path) -> SystemConfig:
    """Read and validate a config file; logs the zenith system loss."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = loads_config(text, base_dir=path.parent)
    log.info("zenith system loss %.2f dB", cfg.zenith_loss_db)
    return cfg


def save_config(cfg: SystemConfig, path) -> None:
    Path(path).write_text(cfg.dumps())


# --- result tables -------------------------------------------------------------


@dataclass
class ResultTable:
    """Named columns with units, rows of values, and run metadata."""

    columns: tuple[tuple[str, str], ...]
    rows: list[tuple] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = tuple((str(n), str(u)) for n, u in self.columns)

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values, table has {len(self.columns)} columns")
        self.rows.append(tuple(values))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.columns)

    def column(self, name: str) -> list:
        i = self.names.index(name)
        return [r[i] for r in self.rows]


def run_metadata(cfg: SystemConfig, seed: int, **extra) -> dict:
    meta = {"config_hash": cfg.digest(), "seed": seed, "version": __version__}
    meta.update(extra)
    return meta


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


def format_results(table: ResultTable) -> str:
    buf = io.StringIO()
    for key, value in table.metadata.items():
        buf.write(f"# {key}: {_cell(value)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"{n} ({u})" if u else n for n, u in table.columns])
    for row in table.rows:
        if len(row) != len(table.columns):
            raise ValueError("row does not match table columns")
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_results(table: ResultTable, path) -> None:
    text = format_results(table)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _parse_cell(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_results(text: str) -> ResultTable:
    meta: dict = {}
    body = []
    for line in text.splitlines(keepends=True):
        if line.startswith("#") and not body:
            key, _, value = line[1:].strip().partition(":")
            meta[key.strip()] = _parse_cell(value.strip())
        else:
            body.append(line)
    reader = csv.reader(body)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("result table has no header row") from None
    columns = []
    for h in header:
        name, _, unit = h.partition(" (")
        columns.append((name, unit[:-1] if unit.endswith(")") else unit))
    rows = [tuple(_parse_cell(c) for c in r) for r in reader]
    return ResultTable(columns=tuple(columns), rows=rows, metadata=meta)


def read_results(path) -> ResultTable:
    return parse_results(Path(path).read_text())
