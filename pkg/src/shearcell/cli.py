"""Command-line driver: single mobility solves, time evolution, and
convergence studies, configured by a YAML file.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 overlap abort.
Verbosity via the SHEARCELL_LOG environment variable (debug/info/warning).
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import __version__
from .bie import SolverOptions, eval_fields, solve_mobility
from .evolve import Evolution, OverlapError, RunLog
from .geometry import (EllipseShape, Lattice, ParticleState, StarShape,
                       Suspension, generate_random_suspension,
                       lattice_at_time)
from .periodize import build_periodizer
from .rheology import fit_power_law, mueff_deformed, mueff_wall

log = logging.getLogger("shearcell")


class ConfigError(Exception):
    pass


def _require(cfg, key, path):
    if key not in cfg:
        raise ConfigError(f"{path}: missing required key '{key}'")
    return cfg[key]


def parse_shape(cfg, path):
    kind = _require(cfg, "kind", path)
    if kind == "ellipse":
        return EllipseShape(float(_require(cfg, "a", path)),
                            float(_require(cfg, "b", path)))
    if kind == "star":
        return StarShape(s=float(_require(cfg, "s", path)),
                         amplitude=float(cfg.get("amplitude", 0.0)),
                         frequency=int(cfg.get("frequency", 0)),
                         phase=float(cfg.get("phase", 0.0)))
    raise ConfigError(f"{path}.kind: unknown shape '{kind}'")


def build_problem(cfg):
    """Config dict -> (suspension factory pieces, lattice, run parameters)."""
    fluid = cfg.get("fluid", {})
    mu = float(fluid.get("mu", 1.0))
    gamma = float(fluid.get("gamma", 1.0))
    if mu <= 0:
        raise ConfigError("fluid.mu: must be positive")

    center = tuple(cfg.get("lattice", {}).get("center", (0.5, 0.5)))

    shapes, states, ns = [], [], []
    if "particles" in cfg:
        for i, p in enumerate(cfg["particles"]):
            path = f"particles[{i}]"
            shapes.append(parse_shape(_require(p, "shape", path), path + ".shape"))
            states.append(ParticleState(np.asarray(_require(p, "center", path),
                                                   dtype=float),
                                        float(p.get("angle", 0.0))))
            n = int(p.get("n", cfg.get("default_n", 64)))
            if n < 16 or n % 2:
                raise ConfigError(f"{path}.n: need even n >= 16, got {n}")
            ns.append(n)
    elif "random_suspension" in cfg:
        r = cfg["random_suspension"]
        lat = lattice_at_time(0.0, gamma, center)
        susp = generate_random_suspension(
            int(_require(r, "count", "random_suspension")),
            int(_require(r, "seed", "random_suspension")),
            lat=lat, n_nodes=int(r.get("n", cfg.get("default_n", 64))),
            area_fraction=float(r.get("area_fraction", 0.25)),
            amplitude_range=tuple(r.get("amplitude_range", (0.0, 0.5))),
            size_ratio=float(r.get("size_ratio", 4.0)))
        shapes, states, ns = susp.shapes, susp.states, susp.ns
    else:
        shapes, states, ns = [], [], []

    solver = cfg.get("solver", {})
    opts = SolverOptions(
        gmres_tol=float(solver.get("gmres_tol", 1e-10)),
        max_iter=int(solver.get("max_iterations", 500)),
        m=int(solver.get("mfs", {}).get("m", 32)),
        n_proxy=int(solver.get("mfs", {}).get("proxy_count", 128)),
        truncation=float(solver.get("mfs", {}).get("truncation", 1e-14)),
        cutoff_factor=float(solver.get("close_cutoff_factor", 10.0)),
        dense_cap=int(solver.get("dense_cap", 3200)))
    for name, val in (("gmres_tol", opts.gmres_tol),
                      ("truncation", opts.truncation)):
        if val <= 0:
            raise ConfigError(f"solver.{name}: must be positive")
    return shapes, states, ns, mu, gamma, center, opts


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_csv(path, header_meta, columns, rows):
    with open(path, "w", newline="") as f:
        for k, v in header_meta.items():
            f.write(f"# {k}: {v}\n")
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)


def write_field_grid(path, nx, ny, bounds, arrays):
    """Flat float64 little-endian arrays after a one-line text header."""
    with open(path, "wb") as f:
        header = f"{nx} {ny} {' '.join(f'{b!r}' for b in bounds)}\n"
        f.write(header.encode())
        for a in arrays:
            f.write(np.asarray(a, dtype="<f8").tobytes())


def read_field_grid(path):
    with open(path, "rb") as f:
        header = f.readline().decode().split()
        nx, ny = int(header[0]), int(header[1])
        bounds = [float(v) for v in header[2:]]
        raw = np.frombuffer(f.read(), dtype="<f8")
    per = nx * ny
    arrays = [raw[i * per:(i + 1) * per].reshape(nx, ny)
              for i in range(raw.size // per)]
    return nx, ny, bounds, arrays


def _meta(cfg):
    return {"shearcell_version": __version__, "config_hash": config_hash(cfg)}


def cmd_mobility(cfg, outdir):
    shapes, states, ns, mu, gamma, center, opts = build_problem(cfg)
    t = float(cfg.get("time", 0.0))
    lat = lattice_at_time(t, gamma, center)
    susp = Suspension(shapes, states, ns)
    sol = solve_mobility(susp, lat, mu, gamma, tol=opts.gmres_tol, opts=opts)

    mu_d = mueff_deformed(sol) if gamma != 0.0 else mu
    try:
        mu_w = mueff_wall(sol) if gamma != 0.0 else mu
    except RuntimeError:
        mu_w = np.nan
    meta = _meta(cfg)
    rows = [[j, sol.v[j, 0], sol.v[j, 1], sol.omega[j]] for j in range(len(susp))]
    write_csv(os.path.join(outdir, "velocities.csv"), meta,
              ["body", "vx", "vy", "omega"], rows)
    write_csv(os.path.join(outdir, "mueff.csv"), meta,
              ["method", "mu_eff"],
              [["deformed", mu_d], ["wall", mu_w]])
    np.save(os.path.join(outdir, "density.npy"), sol.sigma)
    grid = cfg.get("grid")
    if grid:
        nx, ny = int(grid.get("nx", 200)), int(grid.get("ny", 200))
        pts, u, p, inside = eval_fields(sol, nx, ny)
        write_field_grid(os.path.join(outdir, "fields.bin"), nx, ny,
                         [-0.5, 0.5, -0.5, 0.5],
                         [u[0], u[1], p, inside.astype(float)])
    log.info("mobility: %d bodies, %d iterations, mu_eff=%.9g",
             len(susp), sol.iterations, mu_d)
    print(f"mu_eff (deformed contour) = {mu_d:.12g}")
    return 0


def cmd_evolve(cfg, outdir):
    shapes, states, ns, mu, gamma, center, opts = build_problem(cfg)
    ev_cfg = cfg.get("evolve", {})
    dt = float(_require(ev_cfg, "dt", "evolve"))
    t_end = float(_require(ev_cfg, "t_end", "evolve"))
    if dt <= 0:
        raise ConfigError("evolve.dt: must be positive")
    tracers = ev_cfg.get("tracers")
    tr = np.asarray(tracers, dtype=float).T if tracers else None
    evo = Evolution(shapes, states, ns, mu=mu, gamma=gamma, dt=dt,
                    lattice_center=center, opts=opts, tracers=tr,
                    mueff_stride=int(ev_cfg.get("mueff_stride", 1)))
    if ev_cfg.get("restart_from"):
        evo.load_checkpoint(ev_cfg["restart_from"])

    snap_times = ev_cfg.get("snapshot_times", [])
    grid = cfg.get("grid", {})

    def snapshot(t, sol):
        nx, ny = int(grid.get("nx", 200)), int(grid.get("ny", 200))
        pts, u, p, inside = eval_fields(sol, nx, ny)
        write_field_grid(os.path.join(outdir, f"snapshot_t{t:.6f}.bin"),
                         nx, ny, [-0.5, 0.5, -0.5, 0.5],
                         [u[0], u[1], p, inside.astype(float)])

    record = RunLog()
    code = 0
    try:
        evo.run(t_end, record=record,
                checkpoint_stride=int(ev_cfg.get("checkpoint_stride", 0)),
                checkpoint_path=os.path.join(outdir, "checkpoint.json"),
                snapshot_times=snap_times,
                snapshot_fn=snapshot if snap_times else None)
    except OverlapError as e:
        log.warning("overlap abort: %s", e)
        code = 4
    meta = _meta(cfg)
    write_csv(os.path.join(outdir, "runlog.csv"), meta,
              list(RunLog.columns), record.rows)
    fit_cfg = ev_cfg.get("fit_window")
    if fit_cfg and record.rows:
        t = record.column("t")
        v = record.column("mu_eff")
        ok = np.isfinite(v)
        try:
            fit = fit_power_law(t[ok], v[ok], window=tuple(fit_cfg))
            with open(os.path.join(outdir, "fit.json"), "w") as f:
                json.dump({"c": fit.c, "t_star": fit.t_star,
                           "beta": fit.beta, "residual": fit.residual}, f,
                          indent=1)
            print(f"power-law fit: beta={fit.beta:.4f} t*={fit.t_star:.4f} "
                  f"c={fit.c:.4f} residual={fit.residual:.2e}")
        except (ValueError, RuntimeError) as e:
            log.warning("power-law fit failed: %s", e)
    evo.save_checkpoint(os.path.join(outdir, "final_state.json"))
    return code


def cmd_converge(cfg, outdir):
    study = cfg.get("study", {})
    kind = _require(study, "kind", "study")
    meta = _meta(cfg)
    if kind == "dt":
        rows = _dt_study(cfg, study)
        write_csv(os.path.join(outdir, "dt_study.csv"), meta,
                  ["dt", "mu_end", "l2_diff", "order"], rows)
    elif kind == "nodes":
        rows = _node_study(cfg, study)
        write_csv(os.path.join(outdir, "node_study.csv"), meta,
                  ["n", "velocity_error"], rows)
    elif kind == "mfs":
        rows = _mfs_study(cfg, study)
        write_csv(os.path.join(outdir, "mfs_study.csv"), meta,
                  ["m", "proxy_count", "field_error"], rows)
    else:
        raise ConfigError(f"study.kind: unknown study '{kind}'")
    for r in rows:
        print(" ".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                       for v in r))
    return 0


def _dt_study(cfg, study):
    shapes, states, ns, mu, gamma, center, opts = build_problem(cfg)
    t_end = float(study.get("t_end", 0.5))
    dts = [float(v) for v in study.get("dts", (2e-2, 1e-2, 5e-3))]
    stride_series = []
    for dt in dts:
        evo = Evolution(shapes, states, ns, mu=mu, gamma=gamma, dt=dt,
                        lattice_center=center, opts=opts)
        rec = evo.run(t_end)
        stride_series.append((dt, rec.column("t"), rec.column("mu_eff")))
    rows = []
    prev = None
    prev_diff = None
    for dt, t, v in stride_series:
        mu_end = v[-1]
        diff = np.nan
        order = np.nan
        if prev is not None:
            pdt, pt, pv = prev
            stride = int(round(pdt / dt))
            vi = v[::stride][:pv.size]
            m = min(vi.size, pv.size)
            diff = float(np.sqrt(np.mean((vi[:m] - pv[:m]) ** 2)))
            if prev_diff is not None:
                order = float(np.log2(prev_diff / diff))
            prev_diff = diff
        rows.append([dt, float(mu_end), diff, order])
        prev = (dt, t, v)
    return rows


def _node_study(cfg, study):
    shapes, states, ns, mu, gamma, center, opts = build_problem(cfg)
    sweep = [int(v) for v in study.get("ns", (40, 60, 80, 100))]
    n_ref = int(study.get("reference_n", 4 * max(sweep)))
    lat = lattice_at_time(float(cfg.get("time", 0.0)), gamma, center)
    ref = solve_mobility(Suspension(shapes, states, [n_ref] * len(shapes)),
                         lat, mu, gamma, tol=opts.gmres_tol, opts=opts)
    zr = ref.state_derivative
    rows = []
    for n in sweep:
        sol = solve_mobility(Suspension(shapes, states, [n] * len(shapes)),
                             lat, mu, gamma, tol=opts.gmres_tol, opts=opts)
        rows.append([n, float(np.abs(sol.state_derivative - zr).max())])
    return rows


def _mfs_study(cfg, study):
    from .kernels import SourceSet, pressure_matrix, stokeslet_matrix
    mu = float(cfg.get("fluid", {}).get("mu", 0.7))
    lat = Lattice(e1=(1, 0), e2=tuple(study.get("e2", (0.0, 1.0))),
                  center=(0.0, 0.0))
    y0 = np.asarray(study.get("source", 1.5 * np.array([np.cos(0.1),
                                                        np.sin(0.1)])))
    f0 = np.asarray(study.get("force", (0.3, -0.6)))
    gx, gy = np.meshgrid(np.linspace(-0.45, 0.45, 20),
                         np.linspace(-0.45, 0.45, 20))
    pts = lat.E @ np.vstack([gx.ravel(), gy.ravel()])
    vex = stokeslet_matrix(pts, y0[:, None], mu) @ f0
    rows = []
    for m, M in study.get("sweep", ((16, 64), (24, 96), (32, 128), (48, 160))):
        per = build_periodizer(lat, m=int(m), n_proxy=int(M), mu=mu)
        from .kernels import traction_matrix
        xl, xr, xd, xu = per.wall_targets()
        def vf(x):
            return stokeslet_matrix(x, y0[:, None], mu) @ f0
        def tf(x, nrm):
            nn = np.tile(nrm[:, None], (1, x.shape[1]))
            return traction_matrix(x, nn, y0[:, None]) @ f0
        d = np.concatenate([vf(xr) - vf(xl), tf(xr, per.nL) - tf(xl, per.nL),
                            vf(xu) - vf(xd), tf(xu, per.nD) - tf(xd, per.nD)])
        xi, _ = per.solve(d)
        got = per.eval_correction(xi, pts, want=("u",))["u"]
        n = pts.shape[1]
        diff = (got - vex).reshape(2, n)
        diff -= diff[:, :1]
        rows.append([int(m), int(M),
                     float(np.abs(diff).max() / np.abs(vex).max())])
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="shearcell",
        description="Doubly-periodic rigid suspensions in 2D shearing "
                    "Stokes flow")
    ap.add_argument("command", choices=["mobility", "evolve", "converge"])
    ap.add_argument("config", help="YAML run configuration")
    ap.add_argument("-o", "--outdir", default="out")
    ap.add_argument("--threads", type=int, default=0,
                    help="worker threads for kernel summation (0 = all)")
    args = ap.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, os.environ.get("SHEARCELL_LOG",
                                              "WARNING").upper(),
                      logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")
    if args.threads > 0:
        import numba
        numba.set_num_threads(args.threads)

    try:
        with open(args.config) as f:
            cfg = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    os.makedirs(args.outdir, exist_ok=True)
    try:
        fn = {"mobility": cmd_mobility, "evolve": cmd_evolve,
              "converge": cmd_converge}[args.command]
        return fn(cfg, args.outdir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OverlapError as e:
        print(f"overlap abort: {e}", file=sys.stderr)
        return 4
    except (RuntimeError, ValueError) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
