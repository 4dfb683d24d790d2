"""Command-line front end: one subcommand per study, each writing one CSV table."""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys

from . import campaign as cp
from .io_config import ConfigError, ResultTable, SystemConfig, format_results, load_config, run_metadata, write_results
from .optimize import PARAM_NAMES, OptimizationSpec

log = logging.getLogger("satqkd")

PRESETS = {
    # {QBER_I, p_ec}
    "A": (0.001, 1e-8),
    "B": (0.005, 1e-8),
    "C": (0.001, 1e-7),
    "D": (0.005, 1e-7),
}

GB = 1e9


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:count`` (linear) or ``start:stop:count:log``."""
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) not in (3, 4):
                raise ValueError
            lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
            if n < 1:
                raise ValueError
            if len(parts) == 4:
                if parts[3] != "log" or lo <= 0:
                    raise ValueError
                return [lo * (hi / lo) ** (i / (n - 1)) if n > 1 else lo for i in range(n)]
            return [lo + (hi - lo) * i / (n - 1) if n > 1 else lo for i in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid grid {text!r}") from None


def _fix(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep or name not in PARAM_NAMES:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE with NAME in {', '.join(PARAM_NAMES)}")
    try:
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid value in {text!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config (default: $SATQKD_CONFIG, else built-in reference system)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="override {QBER_I, p_ec} with a named system")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--stdout", action="store_true", help="write the CSV to stdout")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--restarts", type=int, default=8, help="simplex restarts per half-window")
    p.add_argument("--grid-points", type=int, default=24, help="half-window grid size")
    p.add_argument("--fix", type=_fix, action="append", default=[], metavar="NAME=VALUE",
                   help="hold a protocol parameter fixed (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true")


def _add_geometry(p: argparse.ArgumentParser, default_theta: float | None = 90.0) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--theta-max", type=float, help=f"peak elevation in degrees (default {default_theta})")
    g.add_argument("--dmin", type=float, help="ground-track offset in metres")
    p.set_defaults(default_theta=default_theta)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satqkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pass", help="optimise one overpass")
    _add_common(p)
    _add_geometry(p)

    p = sub.add_parser("sweep", help="optimised key versus ground-track offset")
    _add_common(p)
    p.add_argument("--dmin-grid", type=_float_list, help="offsets in metres (default: 33 points over the footprint)")
    p.add_argument("--buffer-gb", type=float, help="random-bit buffer size in GB")

    p = sub.add_parser("annual", help="expected annual key")
    _add_common(p)
    p.add_argument("--latitude", type=float, default=55.9)
    p.add_argument("--dmin-grid", type=_float_list)
    p.add_argument("--buffer-gb", type=float, action="append", default=[],
                   help="buffer size in GB (repeatable); omit for no buffer limit")

    p = sub.add_parser("fixed-select", help="choose fixed {p_x_b, mu1, mu2} maximising the annual key")
    _add_common(p)
    p.add_argument("--latitude", type=float, default=55.9)
    p.add_argument("--dmin-grid", type=_float_list)
    p.add_argument("--candidate-restarts", type=int, default=2,
                   help="restarts for the re-optimisation of each candidate curve")

    p = sub.add_parser("source-rate", help="key versus source rate and the critical rate")
    _add_common(p)
    _add_geometry(p)
    p.add_argument("--fs-grid", type=_float_list, default=_float_list("1e6:1e9:13:log"),
                   help="source rates in Hz")

    p = sub.add_parser("buffer", help="key under a random-bit buffer limit")
    _add_common(p)
    _add_geometry(p)
    p.add_argument("--buffer-gb", type=float, required=True)
    p.add_argument("--bits-per-pulse", type=int, default=4)
    p.add_argument("--min-buffer", action="store_true", help="also search for the smallest usable buffer")

    p = sub.add_parser("uncertainty", help="worst-case key under intensity uncertainty")
    _add_common(p)
    _add_geometry(p)
    p.add_argument("--fraction", type=_float_list, default=[0.0, 0.05, 0.10],
                   help="relative intensity uncertainty f (comma list)")
    p.add_argument("--points", type=int, default=3, help="grid points per intensity")
    return parser


def _check(args) -> None:
    if getattr(args, "theta_max", None) is not None and not 0 < args.theta_max <= 90:
        raise UsageError(f"--theta-max must be in (0, 90], got {args.theta_max}")
    if getattr(args, "dmin", None) is not None and args.dmin < 0:
        raise UsageError(f"--dmin must be >= 0, got {args.dmin}")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.restarts < 1 or args.grid_points < 1:
        raise UsageError("--restarts and --grid-points must be >= 1")
    if getattr(args, "latitude", None) is not None and not abs(args.latitude) < 90:
        raise UsageError("--latitude must be in (-90, 90)")
    for name in ("buffer_gb",):
        v = getattr(args, name, None)
        for b in (v if isinstance(v, list) else [v]):
            if b is not None and b < 0:
                raise UsageError("--buffer-gb must be >= 0")
    grid = getattr(args, "dmin_grid", None)
    if grid is not None and (not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 0):
        raise UsageError("--dmin-grid must be nonnegative and strictly ascending")
    fs = getattr(args, "fs_grid", None)
    if fs is not None and (not fs or fs[0] <= 0 or any(b <= a for a, b in zip(fs, fs[1:]))):
        raise UsageError("--fs-grid must be positive and strictly ascending")
    for f in getattr(args, "fraction", None) or []:
        if not 0 <= f < 1:
            raise UsageError("--fraction values must be in [0, 1)")
    if not args.stdout and not args.out:
        raise UsageError("one of --out or --stdout is required")


def _config(args) -> SystemConfig:
    path = args.config or os.environ.get("SATQKD_CONFIG")
    cfg = load_config(path) if path else SystemConfig()
    if args.preset:
        qber, p_ec = PRESETS[args.preset]
        cfg = cfg.with_source(intrinsic_qber=qber, extraneous_count_prob=p_ec)
    log.info("zenith system loss %.2f dB", cfg.zenith_loss_db)
    return cfg


def _spec(args) -> OptimizationSpec:
    return OptimizationSpec(fixed=dict(args.fix), restarts=args.restarts, grid_points=args.grid_points,
                            seed=args.seed)


def _geom(args) -> dict:
    if args.dmin is not None:
        return {"d_min_m": args.dmin}
    return {"theta_max_deg": args.theta_max if args.theta_max is not None else args.default_theta}


def _grid(args, cfg, spec) -> list[float]:
    if args.dmin_grid is not None:
        return args.dmin_grid
    grid = cp.default_dmin_grid(cfg, spec)
    log.info("d_min grid: %d points up to %.4g m", len(grid), grid[-1])
    return grid


PASS_COLUMNS = (
    ("theta_max_deg", "deg"), ("d_min_m", "m"), ("skl_bits", "bit"), ("delta_t_s", "s"),
    ("p_x_a", ""), ("p_x_b", ""), ("p_mu1", ""), ("p_mu2", ""), ("p_mu3", ""), ("mu1", ""), ("mu2", ""),
    ("n_x", "count"), ("qber", ""), ("phi_x", ""), ("s_x0", "count"), ("s_x1", "count"),
    ("lambda_ec_bits", "bit"),
)


def _pass_row(pt: cp.PassPoint) -> tuple:
    p, k = pt.params, pt.key
    if p is None or k is None:
        return (pt.theta_max_deg, pt.d_min_m, 0) + (None,) * (len(PASS_COLUMNS) - 3)
    return (pt.theta_max_deg, pt.d_min_m, pt.skl_bits, p.delta_t_s, p.p_x_a, p.p_x_b, *p.p_mu,
            p.mu[0], p.mu[1], k.n_x, k.qber, k.phi_x, k.s_x0, k.s_x1, k.lambda_ec_bits)


SWEEP_COLUMNS = (("d_min_m", "m"), ("theta_max_deg", "deg"), ("skl_bits", "bit"), ("delta_t_s", "s"),
                 ("qber", ""), ("lambda_ec_bits", "bit"))


def _sweep_table(curve: cp.SweepCurve, meta: dict) -> ResultTable:
    t = ResultTable(SWEEP_COLUMNS, metadata=meta)
    for pt in curve.points:
        k = pt.key
        t.append(pt.d_min_m, pt.theta_max_deg, pt.skl_bits, pt.delta_t_s if k else None,
                 k.qber if k else None, k.lambda_ec_bits if k else None)
    return t


def cmd_pass(args, cfg, spec, meta) -> ResultTable:
    pt = cp.optimize_geometry(cfg, spec, **_geom(args))
    t = ResultTable(PASS_COLUMNS, metadata=meta)
    t.append(*_pass_row(pt))
    return t


def cmd_sweep(args, cfg, spec, meta) -> ResultTable:
    grid = _grid(args, cfg, spec)
    if args.buffer_gb is not None:
        curve = cp.buffered_sweep(cfg, cp.BufferSpec(args.buffer_gb * GB), grid, spec, args.threads)
        meta["buffer_gb"] = args.buffer_gb
    else:
        curve = cp.sweep_dmin(cfg, grid, spec, args.threads)
    meta["skl_int_bit_m"] = cp.skl_integral(curve)
    return _sweep_table(curve, meta)


def cmd_annual(args, cfg, spec, meta) -> ResultTable:
    grid = _grid(args, cfg, spec)
    t = ResultTable((("latitude_deg", "deg"), ("buffer_gb", "GB"), ("t_max_s", "s"), ("skl_int", "bit m"),
                     ("annual_bits", "bit"), ("footprint_edge_m", "m")), metadata=meta)
    for b in (args.buffer_gb or [None]):
        if b is None:
            curve, t_max = cp.sweep_dmin(cfg, grid, spec, args.threads), None
        else:
            buf = cp.BufferSpec(b * GB)
            curve = cp.buffered_sweep(cfg, buf, grid, spec, args.threads)
            t_max = buf.max_transmission_s(cfg.source.rate_hz)
        s_int = cp.skl_integral(curve)
        t.append(args.latitude, b, t_max, s_int, cp.annual_skl(s_int, args.latitude, cfg.orbit),
                 curve.footprint_edge_m)
    return t


def cmd_fixed_select(args, cfg, spec, meta) -> ResultTable:
    grid = _grid(args, cfg, spec)
    sel = cp.select_fixed_params(cfg, grid, spec, candidate_spec=spec.with_(restarts=args.candidate_restarts),
                                 latitude_deg=args.latitude, threads=args.threads)
    meta.update(selected_index=sel.index, annual_full_bits=sel.annual_full,
                annual_selected_bits=sel.annual_selected)
    t = ResultTable((("index", ""), ("d_min_m", "m"), ("p_x_b", ""), ("mu1", ""), ("mu2", ""),
                     ("skl_int", "bit m"), ("annual_bits", "bit"), ("selected", "")), metadata=meta)
    for j, d, fixed, s_int in sel.candidates:
        t.append(j, d, fixed["p_x_b"], fixed["mu1"], fixed["mu2"], s_int,
                 cp.annual_skl(s_int, args.latitude, cfg.orbit), j == sel.index)
    return t


def cmd_source_rate(args, cfg, spec, meta) -> ResultTable:
    res = cp.source_rate_sweep(cfg, args.fs_grid, spec, threads=args.threads, **_geom(args))
    meta["critical_rate_hz"] = res.critical_rate_hz if math.isfinite(res.critical_rate_hz) else "above-grid"
    meta["critical_rate_bracketed"] = res.bracketed
    t = ResultTable((("rate_hz", "Hz"), ("skl_bits", "bit"), ("skl_per_pulse", "bit/pulse")), metadata=meta)
    for p in res.points:
        t.append(p.rate_hz, p.skl_bits, p.skl_per_pulse)
    return t


def cmd_buffer(args, cfg, spec, meta) -> ResultTable:
    buf = cp.BufferSpec(args.buffer_gb * GB, args.bits_per_pulse)
    res = cp.buffer_constraints(cfg, buf, spec, **_geom(args))
    min_bytes = None
    if args.min_buffer:
        mb = cp.min_buffer(cfg, spec, bits_per_pulse=args.bits_per_pulse, **_geom(args))
        min_bytes = mb.buffer_bytes if mb.feasible else "infeasible"
    t = ResultTable((("buffer_bytes", "B"), ("t_max_s", "s"), ("skl_bits", "bit"), ("delta_t_s", "s"),
                     ("theta_max_deg", "deg"), ("min_buffer_bytes", "B")), metadata=meta)
    t.append(buf.buffer_bytes, res.t_max_s, res.skl_bits, res.point.delta_t_s, res.point.theta_max_deg, min_bytes)
    return t


def cmd_uncertainty(args, cfg, spec, meta) -> ResultTable:
    pt = cp.optimize_geometry(cfg, spec, **_geom(args))
    t = ResultTable((("fraction", ""), ("nominal_skl_bits", "bit"), ("worst_skl_bits", "bit")), metadata=meta)
    for f in args.fraction:
        if pt.params is None:
            t.append(f, 0, 0)
            continue
        res = cp.uncertainty_worstcase(cfg, pt.params, cp.UncertaintySpec(f, args.points), **_geom(args))
        t.append(f, res.nominal_skl_bits, res.skl_bits)
    return t


COMMANDS = {
    "pass": cmd_pass,
    "sweep": cmd_sweep,
    "annual": cmd_annual,
    "fixed-select": cmd_fixed_select,
    "source-rate": cmd_source_rate,
    "buffer": cmd_buffer,
    "uncertainty": cmd_uncertainty,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _check(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"satqkd: error: {exc}", file=sys.stderr)
        return 2

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        spec = _spec(args)
        meta = run_metadata(cfg, args.seed, command=args.command)
        table = COMMANDS[args.command](args, cfg, spec, meta)
        if args.out:
            write_results(table, args.out)
            log.info("wrote %s", args.out)
        if args.stdout:
            sys.stdout.write(format_results(table))
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"satqkd: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
