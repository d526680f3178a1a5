"""Run configuration, output files and the ``chns`` command line.

Configuration files are INI text.  Keys that appear before any section
header belong to ``[run]``; a minimal file is just ``scenario = energy_mass``.
Every omitted key falls back to the defaults of that scenario (see
:func:`chns.experiments.default_scenario` and :data:`RUN_DEFAULTS`).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .diagnostics import EnergyRecord, cauchy_convergence, compute_energies, monotonicity_probe
from .fespace import FeSystem
from .stepper import Mobility, PhysParams, SchemeParams, SimState, StepReport

log = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = ("t", "kinetic", "surface", "E_ht", "E_app", "mass",
                      "picard_iters", "newton_iters")

RUN_DEFAULTS = {
    "out": "out",
    "snapshot_every": 0,
    "levels": "4,5,6,7",
    "probe_trials": 20,
    "probe_seed": 0,
    "probe_cells": 4,
}

# section -> allowed keys
SCHEMA = {
    "run": ("scenario", "T", "seed", "frozen_velocity", "dt_factor", *RUN_DEFAULTS),
    "physics": ("epsilon", "Re", "We_star", "mobility", "mobility_value"),
    "scheme": ("dt", "picard_tol", "picard_max", "newton_tol", "newton_max", "projection"),
    "mesh": ("nx", "ny", "lx", "ly"),
    "initial": ("phi", "u", "center", "half_width", "mean", "amplitude", "value"),
    "boundary": ("lid",),
}


class ConfigError(ValueError):
    """Invalid configuration text; ``lineno`` is set for syntax errors."""

    def __init__(self, message: str, lineno: int | None = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


@dataclass
class RunConfig:
    scenario: ex.Scenario
    out: Path
    snapshot_every: int = 0
    levels: tuple = (4, 5, 6, 7)
    probe_trials: int = 20
    probe_seed: int = 0
    probe_cells: int = 4


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _read_ini(text: str) -> tuple[configparser.ConfigParser, dict]:
    lines = text.splitlines()
    offset = 0
    first = next((ln.strip() for ln in lines if ln.strip() and ln.strip()[0] not in "#;"), "")
    if not first.startswith("["):
        text = "[run]\n" + text
        offset = 1
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of a section", exc.lineno - offset) from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0]
        bad = text.splitlines()[lineno - 1].strip()
        raise ConfigError(f"cannot parse {bad!r}", lineno - offset) from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(str(exc).split(":")[-1].strip(), exc.lineno - offset) from exc
    # line number of every key for error messages
    where: dict = {}
    section = "run"
    for i, ln in enumerate(text.splitlines(), start=1 - offset):
        s = ln.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif "=" in s and s[0] not in "#;":
            where[(section, s.split("=", 1)[0].strip())] = i
    return cp, where


def parse_config(text: str, base: Path | None = None) -> RunConfig:
    """Parse and validate configuration text.

    Raises :class:`ConfigError` for syntax errors (with line number), unknown
    sections or keys, and values violating a physical or numerical invariant.
    """
    cp, where = _read_ini(text)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", where.get((sec, key)))

    def get(sec, key, conv, default):
        if cp.has_option(sec, key):
            raw = cp.get(sec, key)
            try:
                return conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})",
                                  where.get((sec, key))) from exc
        return default

    tag = get("run", "scenario", str.strip, None)
    if tag is None:
        raise ConfigError("missing required key 'scenario'")
    if tag not in ex.TAGS:
        raise ConfigError(f"unknown scenario {tag!r}; choose from {', '.join(ex.TAGS)}",
                          where.get(("run", "scenario")))
    d = ex.default_scenario(tag)
    try:
        mob = Mobility(get("physics", "mobility", str.strip, d.phys.mobility.kind),
                       get("physics", "mobility_value", float, d.phys.mobility.value))
        phys = PhysParams(get("physics", "epsilon", float, d.phys.epsilon),
                          get("physics", "Re", float, d.phys.Re),
                          get("physics", "We_star", float, d.phys.We_star), mob)
        sch = d.scheme
        scheme = SchemeParams(get("scheme", "dt", float, sch.dt),
                              get("scheme", "picard_tol", float, sch.picard_tol),
                              get("scheme", "picard_max", int, sch.picard_max),
                              get("scheme", "newton_tol", float, sch.newton_tol),
                              get("scheme", "newton_max", int, sch.newton_max),
                              get("scheme", "projection", str.strip, sch.projection))
        nx = get("mesh", "nx", int, d.mesh.nx)
        mesh = ex.MeshSpec(nx, get("mesh", "ny", int, nx if cp.has_option("mesh", "nx")
                                   else d.mesh.ny),
                           get("mesh", "lx", float, d.mesh.lx), get("mesh", "ly", float, d.mesh.ly))
        if mesh.nx < 1 or mesh.ny < 1 or not (mesh.lx > 0 and mesh.ly > 0):
            raise ValueError("mesh needs nx, ny >= 1 and lx, ly > 0")
        ic = dict(d.ic)
        for key, conv in (("phi", str.strip), ("u", str.strip), ("center", _floats),
                          ("half_width", float), ("mean", float), ("amplitude", float),
                          ("value", float)):
            if cp.has_option("initial", key):
                ic[key] = get("initial", key, conv, None)
        bc = dict(d.bc)
        if cp.has_option("boundary", "lid"):
            bc["lid"] = get("boundary", "lid", _bool, False)
        snap = get("run", "snapshot_every", int, RUN_DEFAULTS["snapshot_every"])
        scen = ex.Scenario(tag, phys, scheme, mesh, get("run", "T", float, d.T), ic, bc,
                           seed=get("run", "seed", int, d.seed),
                           frozen_velocity=get("run", "frozen_velocity", _bool, d.frozen_velocity),
                           snapshot_every=snap,
                           dt_factor=get("run", "dt_factor", float, d.dt_factor))
        if scen.dt_factor <= 0:
            raise ValueError("dt_factor > 0 required")
        levels = tuple(int(v) for v in _floats(get("run", "levels", str, RUN_DEFAULTS["levels"])))
        if len(levels) < 2 or list(levels) != sorted(set(levels)) or levels[0] < 1:
            raise ValueError("levels must be at least two increasing positive integers")
        out = Path(get("run", "out", str.strip, RUN_DEFAULTS["out"]))
        if base is not None and not out.is_absolute():
            out = base / out
        cfg = RunConfig(scen, out, snap, levels,
                        get("run", "probe_trials", int, RUN_DEFAULTS["probe_trials"]),
                        get("run", "probe_seed", int, RUN_DEFAULTS["probe_seed"]),
                        get("run", "probe_cells", int, RUN_DEFAULTS["probe_cells"]))
        if cfg.probe_trials < 1 or cfg.probe_cells < 1:
            raise ValueError("probe_trials and probe_cells must be >= 1")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


# --------------------------------------------------------------------------
# VTK output


def _fmt(x) -> str:
    return "%.17g" % x


def write_fields(state: SimState, path) -> Path:
    """Write ``state`` as a legacy ASCII VTK unstructured grid.

    Point data holds ``phi``, ``mu``, ``p`` and the vertex values of ``u``;
    the bubble coefficients of ``u`` go to cell data so that the file fully
    determines the discrete velocity.
    """
    fe = state.fe
    m = fe.mesh
    nv, nt = m.n_vertices, m.n_triangles
    ux, uy = fe.split_velocity(state.u)
    out = [
        "# vtk DataFile Version 3.0",
        f"chns fields k={state.k} t={_fmt(state.t)}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    out += [f"{_fmt(x)} {_fmt(y)} 0" for x, y in m.vertices]
    out.append(f"CELLS {nt} {4 * nt}")
    out += [f"3 {a} {b} {c}" for a, b, c in m.triangles]
    out.append(f"CELL_TYPES {nt}")
    out += ["5"] * nt
    out.append(f"POINT_DATA {nv}")
    for name, vals in (("phi", state.phi), ("mu", state.mu), ("p", state.p)):
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_fmt(v) for v in vals]
    out.append("VECTORS u double")
    out += [f"{_fmt(a)} {_fmt(b)} 0" for a, b in zip(ux[:nv], uy[:nv])]
    out.append(f"CELL_DATA {nt}")
    for name, vals in (("u_bubble_x", ux[nv:]), ("u_bubble_y", uy[nv:])):
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_fmt(v) for v in vals]
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def read_fields(path) -> dict:
    """Parse a file written by :func:`write_fields` into numpy arrays.

    Returns ``points``, ``triangles``, ``phi``, ``mu``, ``p`` and ``u`` (the
    full velocity coefficient vector including bubbles).
    """
    tokens = Path(path).read_text().split("\n")
    i = 0
    data: dict = {}

    def take(n):
        nonlocal i
        rows = tokens[i:i + n]
        i += n
        return rows

    while i < len(tokens):
        line = tokens[i].strip()
        i += 1
        if not line:
            continue
        head = line.split()
        if head[0] == "POINTS":
            pts = np.array([r.split() for r in take(int(head[1]))], dtype=float)
            data["points"] = pts[:, :2]
        elif head[0] == "CELLS":
            data["triangles"] = np.array([r.split()[1:] for r in take(int(head[1]))], dtype=np.int64)
        elif head[0] == "CELL_TYPES":
            data["cell_types"] = np.array(take(int(head[1])), dtype=int)
        elif head[0] in ("POINT_DATA", "CELL_DATA"):
            count = int(head[1])
        elif head[0] == "SCALARS":
            take(1)  # lookup table
            data[head[1]] = np.array(take(count), dtype=float)
        elif head[0] == "VECTORS":
            data[head[1] + "_vertex"] = np.array([r.split() for r in take(count)], dtype=float)[:, :2]
    uv = data.pop("u_vertex")
    bx, by = data.pop("u_bubble_x"), data.pop("u_bubble_y")
    data["u"] = np.concatenate([uv[:, 0], bx, uv[:, 1], by])
    return data


# --------------------------------------------------------------------------
# CSV diagnostics


def _row(item) -> list:
    if isinstance(item, StepReport):
        e, pit, nit = item.energy, item.picard_iters, item.newton_iters
    elif isinstance(item, EnergyRecord):
        e, pit, nit = item, 0, 0
    else:
        e, pit, nit = item
    return [repr(float(e.t)), repr(float(e.kinetic)), repr(float(e.surface)), repr(float(e.E_ht)),
            repr(float(e.E_app)), repr(float(e.mass)), str(int(pit)), str(int(nit))]


class DiagnosticsWriter:
    """Streams diagnostic rows to a CSV file, flushing after every row."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(DIAGNOSTIC_COLUMNS)

    def write(self, item):
        self._w.writerow(_row(item))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_diagnostics(series, path) -> Path:
    """CSV with one row per entry of ``series``.

    Entries may be :class:`StepReport`, :class:`EnergyRecord` (iteration
    counts written as 0) or ``(EnergyRecord, picard_iters, newton_iters)``.
    Floats use ``repr`` and therefore round-trip exactly.
    """
    with DiagnosticsWriter(path) as w:
        for item in series:
            w.write(item)
    return Path(path)


def read_diagnostics(path) -> dict:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if tuple(header) != DIAGNOSTIC_COLUMNS:
        raise ValueError(f"unexpected header {header}")
    cols = list(zip(*body)) if body else [()] * len(header)
    return {h: np.array(c, dtype=int if h.endswith("iters") else float)
            for h, c in zip(header, cols)}


def write_cauchy_table(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variable", "coarse", "fine", "error", "rate"))
        for r in rows:
            w.writerow((r.variable, r.levels[0], r.levels[1], repr(r.error),
                        "" if r.rate is None else repr(r.rate)))
    return path


# --------------------------------------------------------------------------
# command line


def _limit_threads():
    n = os.environ.get("CHNS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def load_config(args) -> RunConfig:
    path = args.config or args.config_pos
    if path is None:
        raise ConfigError("no configuration given (use --config PATH)")
    path = Path(path)
    cfg = parse_config(path.read_text(), base=Path.cwd())
    scen = cfg.scenario
    if args.seed is not None:
        scen = replace(scen, seed=args.seed)
    if args.snapshot_every is not None:
        if args.snapshot_every < 0:
            raise ConfigError("snapshot_every >= 0 required")
        scen = replace(scen, snapshot_every=args.snapshot_every)
        cfg.snapshot_every = args.snapshot_every
    cfg.scenario = scen
    if args.out is not None:
        cfg.out = Path(args.out)
    return cfg


def cmd_run(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    every = cfg.snapshot_every
    scen = replace(cfg.scenario, snapshot_every=0)
    with DiagnosticsWriter(cfg.out / "diagnostics.csv") as diag:

        def on_step(state, rep):
            if rep is None:  # initial and startup levels
                diag.write(compute_energies(state, scen.phys, scen.scheme.dt))
            else:
                diag.write(rep)
            if every and state.k % every == 0:
                write_fields(state, cfg.out / f"fields_{state.k:06d}.vtk")

        res = ex.run_scenario(scen, callback=on_step)
    write_fields(res.state, cfg.out / "fields_final.vtk")
    e0, e1 = res.energies[0], res.energies[-1]
    print(f"{cfg.scenario.tag}: {res.state.k} steps to t={res.state.t:.6g}; "
          f"E_app {e0.E_app:.10g} -> {e1.E_app:.10g}; mass drift {e1.mass - e0.mass:.3e}")
    return 0


def cmd_converge(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = cauchy_convergence(cfg.scenario, list(cfg.levels))
    write_cauchy_table(rows, cfg.out / "convergence.csv")
    for r in rows:
        rate = "" if r.rate is None else f"{r.rate:6.3f}"
        print(f"{r.variable:>3}  {r.levels[0]}-{r.levels[1]}  {r.error:.4e}  {rate}")
    return 0


def cmd_probe(cfg: RunConfig) -> int:
    scen = cfg.scenario
    n = cfg.probe_cells
    fe = FeSystem(replace(scen.mesh, nx=n, ny=n).build())
    state, bc = ex.initial_state(scen, fe)
    from .stepper import CHNSStepper

    state = CHNSStepper(fe, scen.phys, scen.scheme, velocity_bc=bc).startup(state)
    worst, values = monotonicity_probe(fe, state, scen.phys, scen.scheme,
                                       n_trials=cfg.probe_trials, seed=cfg.probe_seed,
                                       return_all=True)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "monotonicity.txt").write_text("\n".join(repr(float(v)) for v in values) + "\n")
    print(f"min normalized pairing over {len(values)} trials: {worst:.6e}")
    return 0 if worst >= -1e-10 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chns", description="Second order CHNS finite element solver")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run a scenario and write diagnostics and fields"),
                           ("converge", "Cauchy convergence study over mesh levels"),
                           ("probe-monotonicity", "check monotonicity of the reduced operator")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config_pos", nargs="?", metavar="CONFIG")
        s.add_argument("--config", help="INI configuration file")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="random seed override")
        s.add_argument("--snapshot-every", type=int, help="write fields every N steps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        cfg = load_config(args)
        cmd = {"run": cmd_run, "converge": cmd_converge, "probe-monotonicity": cmd_probe}
        return cmd[args.command](cfg)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
