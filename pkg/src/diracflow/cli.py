"""Batch front end: config parsing, initial data, runs and reports.

Config files are ``key = value`` lines with ``#`` comments, e.g.::

    n = 16
    delta = 0,0
    target = sphere2
    initial_map = fourier 0,0,1 | 1 0 0 0.05 0 ; 0 1 1 0 0.05
    initial_spinor = cluster 0
    dt = 1e-3
    horizon = 0.2
"""

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from fractions import Fraction

import numpy as np

from . import flow
from .dirac_map import spectrum_near_zero, spinor_solve, twisted_norm
from .errors import ConfigError, DiracFlowError, EmptyKernel
from .target import get_target, TARGETS
from .torus_spin import SpinTorusGrid, read_snapshot, write_snapshot

log = logging.getLogger(__name__)

__all__ = ["RunConfig", "parse_config", "initial_map", "initial_spinor", "build_initial",
           "run", "spectrum_report", "self_check", "main", "CSV_COLUMNS"]

CSV_COLUMNS = ("t", "dt", "dirichlet", "spinor_term", "residual", "constraint_violation",
               "sigma1_norm", "Lambda", "dim_C", "dim_H", "index_parity", "picard_ratio")

_BOOL = {"true": True, "on": True, "yes": True, "1": True,
         "false": False, "off": False, "no": False, "0": False}


@dataclass(frozen=True)
class RunConfig:
    n: int
    target: str
    initial_map: str
    dt: float
    horizon: float
    delta: tuple = (Fraction(0), Fraction(0))
    initial_spinor: str = "cluster 0"
    coupling: bool = True
    picard_mode: bool = False
    reproject_map: bool = True
    respawn_spinor: bool = True
    projection: str = "eig"
    n_quad: int = 32
    out: str = "run_out"
    snapshots: int = 0
    seed: int = 0

    def flow_config(self):
        return flow.FlowConfig(dt=self.dt, horizon=self.horizon, coupling=self.coupling,
                               respawn_spinor=self.respawn_spinor,
                               reproject_map=self.reproject_map, picard_mode=self.picard_mode,
                               projection=self.projection, n_quad=self.n_quad)

    def grid(self):
        return SpinTorusGrid(self.n, self.delta)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "delta":
                v = ",".join(str(d) for d in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


REQUIRED = ("n", "target", "initial_map", "dt", "horizon")


def _parse_int(s):
    return int(s)


def _parse_float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _parse_bool(s):
    try:
        return _BOOL[s.lower()]
    except KeyError:
        raise ValueError("expected true/false") from None


def _parse_delta(s):
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated entries")
    out = tuple(Fraction(p) for p in parts)
    for d in out:
        if d not in (0, Fraction(1, 2)):
            raise ValueError("entries must be 0 or 1/2")
    return out


_PARSERS = {
    "n": _parse_int, "dt": _parse_float, "horizon": _parse_float, "delta": _parse_delta,
    "coupling": _parse_bool, "picard_mode": _parse_bool, "reproject_map": _parse_bool,
    "respawn_spinor": _parse_bool, "n_quad": _parse_int, "snapshots": _parse_int,
    "seed": _parse_int, "target": str, "initial_map": str, "initial_spinor": str,
    "projection": str, "out": str,
}


def _check_map_text(text):
    kind, _, rest = text.partition(" ")
    if kind == "constant":
        vals = [float(v) for v in rest.replace(",", " ").split()]
        if not vals:
            raise ValueError("constant map needs a point")
    elif kind == "winding":
        ab = rest.split()
        if len(ab) != 2:
            raise ValueError("winding map needs two integers")
        [int(v) for v in ab]
    elif kind == "fourier":
        _parse_fourier(rest)
    else:
        raise ValueError("initial_map must start with constant, winding or fourier")


def _parse_fourier(rest):
    base, _, terms = rest.partition("|")
    point = [float(v) for v in base.replace(",", " ").split()]
    if not point:
        raise ValueError("fourier map needs a base point")
    out = []
    for term in terms.split(";"):
        if not term.strip():
            continue
        items = term.split()
        if len(items) != 5:
            raise ValueError("fourier terms are 'k1 k2 component cos_coeff sin_coeff'")
        out.append((int(items[0]), int(items[1]), int(items[2]),
                    float(items[3]), float(items[4])))
    return np.array(point), out


def parse_config(text, base_dir="."):
    """Parse and validate ``key = value`` text.  Raises :class:`ConfigError`
    listing every problem with its line number."""
    values, where, errors = {}, {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append((lineno, f"expected 'key = value', got {line!r}"))
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            errors.append((lineno, f"unknown key {key!r}"))
            continue
        if key in values:
            errors.append((lineno, f"duplicate key {key!r}"))
            continue
        try:
            values[key] = _PARSERS[key](value)
        except (ValueError, ZeroDivisionError) as exc:
            errors.append((lineno, f"bad value for {key}: {value!r} ({exc})"))
            continue
        where[key] = lineno
    for key in REQUIRED:
        if key not in values and not any(f"{key!r}" in m for _, m in errors):
            errors.append((0, f"missing required key {key!r}"))

    def bad(key, msg):
        errors.append((where.get(key, 0), msg))

    if "n" in values and (values["n"] % 2 or values["n"] < 8):
        bad("n", "n must be even and at least 8")
    for key in ("dt", "horizon"):
        if key in values and not values[key] > 0:
            bad(key, f"{key} must be positive")
    if "dt" in values and "horizon" in values and values["horizon"] < values["dt"]:
        bad("horizon", "horizon must be at least dt")
    if "target" in values and values["target"] not in TARGETS:
        bad("target", f"unknown target {values['target']!r}; choose from {sorted(TARGETS)}")
    if "projection" in values and values["projection"] not in ("eig", "contour"):
        bad("projection", "projection must be eig or contour")
    if "n_quad" in values and values["n_quad"] < 4:
        bad("n_quad", "n_quad must be at least 4")
    if "snapshots" in values and values["snapshots"] < 0:
        bad("snapshots", "snapshots must be nonnegative")
    if "initial_map" in values:
        try:
            _check_map_text(values["initial_map"])
        except ValueError as exc:
            bad("initial_map", str(exc))
    if "initial_spinor" in values:
        kind, _, arg = values["initial_spinor"].partition(" ")
        if kind == "cluster":
            try:
                if int(arg) < 0:
                    raise ValueError
            except ValueError:
                bad("initial_spinor", "cluster index must be a nonnegative integer")
        elif kind == "file":
            path = arg.strip()
            if not os.path.isfile(os.path.join(base_dir, path)):
                bad("initial_spinor", f"spinor file {path!r} does not exist")
            else:
                values["initial_spinor"] = f"file {os.path.normpath(os.path.join(base_dir, path))}"
        else:
            bad("initial_spinor", "initial_spinor must be 'cluster <index>' or 'file <path>'")
    if errors:
        raise ConfigError(sorted(errors))
    return RunConfig(**values)


# --- initial data ------------------------------------------------------------

def initial_map(config, grid=None, target=None):
    """Evaluate the ``initial_map`` description on the grid, exactly on the target."""
    grid = grid or config.grid()
    target = target or get_target(config.target)
    X1, X2 = grid.mesh
    kind, _, rest = config.initial_map.partition(" ")
    if kind == "constant":
        p = np.array([float(v) for v in rest.replace(",", " ").split()])
        if p.shape != (target.q,):
            raise ConfigError([(0, f"constant point needs {target.q} coordinates")])
        u = np.broadcast_to(target.project(p), (grid.n, grid.n, target.q)).copy()
    elif kind == "winding":
        a, b = (int(v) for v in rest.split())
        k = grid.kappa
        if target.q == 3:
            th = k * (a * X1 + b * X2)
            u = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=-1)
        else:
            r1, r2 = target.radii
            u = np.stack([r1 * np.cos(k * a * X1), r1 * np.sin(k * a * X1),
                          r2 * np.cos(k * b * X2), r2 * np.sin(k * b * X2)], axis=-1)
    else:
        point, terms = _parse_fourier(rest)
        if point.shape != (target.q,):
            raise ConfigError([(0, f"fourier base point needs {target.q} coordinates")])
        u = np.broadcast_to(point, (grid.n, grid.n, target.q)).copy()
        for k1, k2, comp, ca, sa in terms:
            if not 0 <= comp < target.q:
                raise ConfigError([(0, f"fourier component {comp} out of range")])
            ph = grid.kappa * (k1 * X1 + k2 * X2)
            u[..., comp] += ca * np.cos(ph) + sa * np.sin(ph)
        # nearest-point projection is used as a retraction here, so points
        # outside the tube are allowed as long as the projection is defined
        with np.errstate(divide="ignore", invalid="ignore"):
            u = target.project(u, check=False)
        if not np.all(np.isfinite(u)):
            raise ConfigError([(0, "fourier initial map hits a point where the "
                                   "projection is undefined")])
    return u


def initial_spinor(config, grid, spectral):
    """Kernel basis element (or snapshot file), normalised in L^2."""
    kind, _, arg = config.initial_spinor.partition(" ")
    if kind == "cluster":
        idx = int(arg)
        if spectral.kernel_dim_complex == 0:
            raise EmptyKernel("no near-zero eigenvalue cluster for the initial map")
        if idx >= spectral.kernel_dim_complex:
            raise ConfigError([(0, f"cluster index {idx} >= kernel dimension "
                                   f"{spectral.kernel_dim_complex}")])
        psi = spectral.kernel_basis[idx]
    else:
        sgrid, skind, psi = read_snapshot(arg.strip(), side=grid.side)
        if skind != "spinor" or sgrid != grid:
            raise ConfigError([(0, f"spinor file {arg!r} does not match the run grid")])
    return psi / twisted_norm(psi, grid)


def build_initial(config):
    """Return ``(grid, target, u0, psi0, spectral0, info)``.

    With coupling off ``psi0`` is ``None`` and the spectrum is still reported
    if it has a kernel.
    """
    grid = config.grid()
    target = get_target(config.target)
    u0 = initial_map(config, grid, target)
    spectral = spectrum_near_zero(grid, target, u0)
    info = {"dim_C": spectral.kernel_dim_complex,
            "dim_H": spectral.kernel_dim_quaternionic,
            "Lambda": spectral.gap,
            "dim_H_is_one": spectral.kernel_dim_quaternionic == 1}
    if not config.coupling:
        return grid, target, u0, None, spectral, info
    if spectral.kernel_dim_complex == 0:
        raise EmptyKernel("no near-zero eigenvalue cluster for the initial map; "
                          "set coupling = false to run the harmonic map flow")
    psi0 = initial_spinor(config, grid, spectral)
    return grid, target, u0, psi0, spectral, info


# --- reports -----------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(v)
    v = float(v)
    if math.isnan(v):
        return ""
    return f"{v:.17g}"


def _row(state, picard_ratio=None):
    m, sp = state.monitors, state.spectral
    spect = (sp.gap, sp.kernel_dim_complex, sp.kernel_dim_quaternionic, sp.index_parity) \
        if (sp is not None and state.psi is not None) else (None,) * 4
    dt = None if math.isnan(state.dt) else state.dt
    vals = (state.t, dt, m.dirichlet, m.spinor_term, m.residual, m.constraint_violation,
            m.sigma1) + spect + (picard_ratio,)
    return ",".join(_fmt(v) for v in vals)


def _snap(out, index, grid, state):
    write_snapshot(os.path.join(out, f"snap_{index:06d}_map.csv"), state.u, grid, "map")
    if state.psi is not None:
        write_snapshot(os.path.join(out, f"snap_{index:06d}_spinor.csv"), state.psi, grid,
                       "spinor")


def run(config, out=None, snapshots=None, picard=None):
    """Execute a run; returns the exit status (0 ok, 2 numerical abort).

    Writes ``run.csv`` (one row per accepted step, the initial state first)
    and, every ``snapshots`` steps, map and spinor snapshot files.
    """
    out = config.out if out is None else out
    snapshots = config.snapshots if snapshots is None else snapshots
    picard = config.picard_mode if picard is None else picard
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "run.csv")
    cfg = config.flow_config()
    status = 0
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        try:
            grid, target, u0, psi0, spec0, info = build_initial(config)
            log.info("initial kernel: dim_C=%d dim_H=%d Lambda=%.6g", info["dim_C"],
                     info["dim_H"], info["Lambda"])
            state = flow.initial_state(grid, target, u0, psi0,
                                       spec0 if psi0 is not None else None, cfg)
            if picard:
                _run_picard(grid, target, state, cfg, fh, out, snapshots)
            else:
                fh.write(_row(state) + "\n")
                if snapshots:
                    _snap(out, 0, grid, state)
                count = [0]

                def emit(s):
                    count[0] += 1
                    fh.write(_row(s) + "\n")
                    if snapshots and count[0] % snapshots == 0:
                        _snap(out, count[0], grid, s)

                flow.integrate(grid, target, state, cfg, callback=emit)
        except DiracFlowError as exc:
            if isinstance(exc, ConfigError):
                raise
            fh.write(f"# aborted: {type(exc).__name__}: {exc}\n")
            log.error("run aborted: %s", exc)
            status = 2
    return status


def _run_picard(grid, target, state, cfg, fh, out, snapshots):
    """Rows for the converged fixed point; ``picard_ratio`` is the largest
    successive-iterate contraction ratio of the run."""
    res = flow.picard_solve(grid, target, state.u, state.psi, state.spectral, cfg)
    ratio = max(res.ratios) if res.ratios else 0.0
    fh.write(_row(state, ratio) + "\n")
    prev = state
    for k in range(1, len(res.times)):
        u = res.trajectory[k]
        violation = flow.constraint_violation(target, u)
        u = target.project(u)
        psi, s1, spect = None, math.nan, state.spectral
        if state.psi is not None:
            spect = spectrum_near_zero(grid, target, u, threshold=state.spectral.threshold)
            psi, s1 = spinor_solve(grid, target, state.u, state.psi, u, spect)
        mon = flow.compute_monitors(grid, target, u, psi, violation, s1, True)
        prev = flow.FlowState(float(res.times[k]), u, psi, spect, mon,
                              initial_gap=state.initial_gap, dt=cfg.dt)
        fh.write(_row(prev, ratio) + "\n")
        if snapshots and k % snapshots == 0:
            _snap(out, k, grid, prev)
    if not res.converged:
        fh.write(f"# picard iteration stopped after {len(res.distances)} iterations "
                 f"without reaching tolerance (last distance {res.distances[-1]:.3e})\n")


def spectrum_report(config):
    grid = config.grid()
    target = get_target(config.target)
    u0 = initial_map(config, grid, target)
    sp = spectrum_near_zero(grid, target, u0)
    lines = [f"grid n={grid.n} delta={grid.spin_structure[0]},{grid.spin_structure[1]} "
             f"target={config.target}",
             f"kernel threshold {sp.threshold:.6g}",
             f"dim_C ker {sp.kernel_dim_complex}",
             f"dim_H ker {sp.kernel_dim_quaternionic}",
             f"index parity {sp.index_parity}",
             f"single quaternionic kernel dimension: {sp.kernel_dim_quaternionic == 1}",
             f"Lambda {sp.gap:.12g}",
             "eigenvalues near zero:"]
    lines += [f"  {v: .12e}" for v in np.sort(sp.eigenvalues)]
    return "\n".join(lines)


# --- built-in oracle checks ---------------------------------------------------

def self_check(stream=None):
    """Fast oracle and property checks; returns True if all pass."""
    from .torus_spin import CLIFFORD, flat_dirac_matrix, make_grid
    from .dirac_map import kernel_project_contour, kernel_project_eig, project_tangent
    from .target import Sphere, holonomy_triangle

    stream = stream or sys.stdout
    results = []

    def record(name, ok, detail):
        results.append(ok)
        stream.write(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}\n")

    for delta in ((0, 0), (0, 0.5), (0.5, 0), (0.5, 0.5)):
        g = make_grid(8, delta)
        ev = np.linalg.eigvalsh(flat_dirac_matrix(g))
        K1, K2 = g.mode_grid()
        r = np.hypot(K1, K2).ravel()
        err = np.abs(np.sort(ev) - np.sort(np.concatenate([r, -r]))).max()
        record(f"flat spectrum delta={delta}", err < 1e-10, f"max error {err:.2e}")

    c1, c2 = CLIFFORD.c
    v = np.array([0.3 + 0.1j, -0.7j])
    err = max(np.abs(CLIFFORD.j(CLIFFORD.j(v)) + v).max(),
              np.abs(CLIFFORD.j(c1 @ v) - c1 @ CLIFFORD.j(v)).max(),
              np.abs(CLIFFORD.j(c2 @ v) - c2 @ CLIFFORD.j(v)).max(),
              np.abs(c1 @ c1 + np.eye(2)).max(), np.abs(c1 @ c2 + c2 @ c1).max())
    record("Clifford and quaternionic relations", err < 1e-12, f"max defect {err:.2e}")

    S = Sphere()
    g = make_grid(8)
    X1, X2 = g.mesh
    a = 0.05
    u = S.project(np.stack([a * np.cos(X1), a * np.sin(X2), np.ones_like(X1)], axis=-1))
    sp = spectrum_near_zero(g, S, u)
    rng = np.random.default_rng(0)
    sigma = project_tangent(S.tangent_projector(u),
                            rng.normal(size=u.shape + (2,)) + 1j * rng.normal(size=u.shape + (2,)))
    diff = twisted_norm(kernel_project_eig(g, sp, sigma)
                        - kernel_project_contour(g, S, u, sigma, sp.gap, spectral=sp), g)
    record("contour vs eigen projection", diff < 1e-6,
           f"L2 difference {diff:.2e}, dim_C ker {sp.kernel_dim_complex}")

    Z = np.array([1.0, 0.0, 0.0])
    _, dev = holonomy_triangle(S, np.array([0.0, 0, 1]), np.array([1.0, 0, 0]),
                               np.array([0.0, 1, 0]), Z)
    err = abs(dev - 2 * np.sin(np.pi / 4))
    record("sphere octant holonomy", err < 1e-6, f"deviation error {err:.2e}")
    return all(results)


# --- entry point --------------------------------------------------------------

def _load(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="diracflow",
                                     description="Dirac-harmonic map heat flow on the flat 2-torus")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_sim = sub.add_parser("simulate", help="run the coupled flow")
    p_sim.add_argument("config")
    p_sim.add_argument("--out", default=None)
    p_sim.add_argument("--snapshots", type=int, default=None, metavar="EVERY_N_STEPS")
    p_sim.add_argument("--picard", action="store_true", default=None)
    p_spec = sub.add_parser("spectrum", help="spectral report for the initial map")
    p_spec.add_argument("config")
    sub.add_parser("check", help="run the built-in oracle checks")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "check":
        return 0 if self_check() else 2
    try:
        config = _load(args.config)
        if args.command == "spectrum":
            print(spectrum_report(config))
            return 0
        return run(config, out=args.out, snapshots=args.snapshots, picard=args.picard)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        for line, msg in exc.errors:
            print(f"config error{f' (line {line})' if line else ''}: {msg}", file=sys.stderr)
        return 1
    except DiracFlowError as exc:
        print(f"numerical abort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
