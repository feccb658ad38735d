"""Time evolution of the particle configuration.

The quasi-static solve defines a first-order ODE for the stacked state
s = (centers..., angles...); forward Euler advances it. The lattice skew
is reduced once per shear time and particle centers are wrapped back into
the current cell (pure bookkeeping; the physics is lattice-periodic).
Runs abort on overlap since no non-hydrodynamic forces are modelled.
"""

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .bie import SolverOptions, background_velocity, solve_mobility
from .closeeval import build_near_correction, inside_mask
from .geometry import Suspension, lattice_at_time, min_separation
from .rheology import mueff_deformed

log = logging.getLogger("shearcell")


def pack_state(states):
    """State vector (x_1, y_1, ..., x_K, y_K, theta_1, ..., theta_K)."""
    if not states:
        return np.zeros(0)
    centers = np.concatenate([np.asarray(st.center, dtype=float)
                              for st in states])
    angles = np.array([st.angle for st in states])
    return np.concatenate([centers, angles])


def unpack_state(s, k):
    centers = s[:2 * k].reshape(k, 2)
    angles = s[2 * k:]
    return centers, angles


class OverlapError(RuntimeError):
    pass


@dataclass
class RunLog:
    """Per-step diagnostics of an evolution run."""

    columns = ("t", "dt", "gmres_iterations", "min_separation", "mu_eff",
               "rigid_residual", "wall_seconds")
    rows: list = field(default_factory=list)
    tracer_history: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append([kw[c] for c in self.columns])

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])


class Evolution:
    """Forward-Euler evolution driven by the quasi-static mobility solve."""

    def __init__(self, shapes, states0, ns, mu=1.0, gamma=1.0, dt=5e-4,
                 lattice_center=(0.5, 0.5), opts=None, tracers=None,
                 mueff_stride=1, overlap_guard=True, stepper=None):
        self.shapes = list(shapes)
        self.k = len(shapes)
        self.ns = list(ns)
        self.mu = mu
        self.gamma = gamma
        self.dt = dt
        self.center = tuple(lattice_center)
        self.opts = opts or SolverOptions()
        self.t = 0.0
        self.s = pack_state(states0)
        self.tracers = None if tracers is None else np.asarray(tracers, float).copy()
        self.tracer_frozen = (np.zeros(self.tracers.shape[1], dtype=bool)
                              if self.tracers is not None else None)
        self.mueff_stride = mueff_stride
        self.overlap_guard = overlap_guard
        self.stepper = stepper or euler_step
        self.steps_taken = 0

    # -- pieces ---------------------------------------------------------------

    def suspension_at(self, t, s):
        from .geometry import ParticleState
        lat = lattice_at_time(t, self.gamma, self.center)
        centers, angles = unpack_state(s, self.k)
        states = [ParticleState(lat.wrap_point(c), a)
                  for c, a in zip(centers, angles)]
        return Suspension(self.shapes, states, self.ns), lat

    def mobility_rhs(self, t, s):
        """F(t, s): the stacked (velocities, angular velocities) and the
        solution it came from."""
        susp, lat = self.suspension_at(t, s)
        if self.overlap_guard and len(susp):
            dmin = min_separation(susp, lat)
            threshold = max(1e-8, 0.01 * min(b.h for b in susp.bodies) ** 2)
            if dmin < threshold:
                raise OverlapError(
                    f"minimum separation {dmin:.3e} below guard {threshold:.3e}")
        else:
            dmin = np.nan
        sol = solve_mobility(susp, lat, self.mu, self.gamma,
                             tol=self.opts.gmres_tol, opts=self.opts)
        return sol.state_derivative, sol, dmin

    def advect_tracers(self, sol, dt):
        """Euler advection of tracer points by the total velocity field;
        tracers entering a body are frozen and flagged."""
        if self.tracers is None:
            return
        ctx = sol.ctx
        live = ~self.tracer_frozen
        if not live.any():
            return
        pts = self.tracers[:, live]
        inside = np.zeros(pts.shape[1], dtype=bool)
        for j in range(ctx.K):
            for s in ctx.image_shifts[j]:
                inside |= inside_mask(ctx.bodies[j], pts, shift=s)
        if inside.any():
            idx = np.nonzero(live)[0][inside]
            self.tracer_frozen[idx] = True
            live = ~self.tracer_frozen
            pts = self.tracers[:, live]
            if pts.shape[1] == 0:
                return
        u = ctx.near_fields(sol.sigma, pts, ("u",))["u"] if ctx.K else \
            np.zeros(2 * pts.shape[1])
        if ctx.K:
            corr = build_near_correction(
                ctx.bodies, ctx.image_shifts, pts, ctx.mu, want=("u",),
                cutoff_factor=ctx.opts.cutoff_factor,
                cutoff_cap=ctx.cutoff_cap, evaluators=ctx.evaluators,
                fine_cache=ctx.fine_cache)
            if not corr.empty:
                corr.accumulate("u", ctx.densities(sol.sigma), u)
            u += ctx.per.eval_matrices(pts, want=("u",))["u"] @ sol.xi
            uc = ctx.velocity_gauge(sol.sigma, sol.xi)
            u[:pts.shape[1]] -= uc[0]
            u[pts.shape[1]:] -= uc[1]
        u += background_velocity(pts, ctx.gamma)
        n = pts.shape[1]
        self.tracers[0, live] += dt * u[:n]
        self.tracers[1, live] += dt * u[n:]

    # -- stepping ---------------------------------------------------------------

    def step(self, record=None):
        """Advance one time step; returns the solution used for the step."""
        t0 = time.perf_counter()
        F, sol, dmin = self.mobility_rhs(self.t, self.s)
        mueff = np.nan
        if record is not None and self.steps_taken % self.mueff_stride == 0:
            mueff = (mueff_deformed(sol) if self.gamma != 0.0 else self.mu)
        self.advect_tracers(sol, self.dt)
        self.s = self.stepper(self.s, self.t, self.dt, F)
        self.t += self.dt
        self.steps_taken += 1
        if record is not None:
            record.add(t=self.t - self.dt, dt=self.dt,
                       gmres_iterations=sol.iterations,
                       min_separation=dmin, mu_eff=mueff,
                       rigid_residual=sol.rigid_residual,
                       wall_seconds=time.perf_counter() - t0)
            if self.tracers is not None:
                record.tracer_history.append(self.tracers.copy())
        return sol

    def run(self, t_end, record=None, checkpoint_stride=0,
            checkpoint_path=None, snapshot_times=(), snapshot_fn=None):
        """Step until t_end; flushes partial logs when an overlap aborts."""
        record = record if record is not None else RunLog()
        snap = sorted(snapshot_times)
        nsteps = int(round((t_end - self.t) / self.dt))
        try:
            for _ in range(nsteps):
                if snap and self.t >= snap[0] - 0.5 * self.dt:
                    snap.pop(0)
                    if snapshot_fn is not None:
                        _, sol, _ = self.mobility_rhs(self.t, self.s)
                        snapshot_fn(self.t, sol)
                self.step(record)
                if checkpoint_stride and checkpoint_path and \
                        self.steps_taken % checkpoint_stride == 0:
                    self.save_checkpoint(checkpoint_path)
        except OverlapError:
            log.warning("run aborted by overlap guard at t=%.6f", self.t)
            raise
        return record

    # -- checkpointing ------------------------------------------------------------

    def save_checkpoint(self, path):
        data = {
            "t": self.t,
            "steps_taken": self.steps_taken,
            "state": self.s.tolist(),
            "tracers": None if self.tracers is None else self.tracers.tolist(),
            "tracer_frozen": (None if self.tracer_frozen is None
                              else self.tracer_frozen.tolist()),
        }
        with open(path, "w") as f:
            json.dump(data, f)

    def load_checkpoint(self, path):
        with open(path) as f:
            data = json.load(f)
        self.t = data["t"]
        self.steps_taken = data["steps_taken"]
        self.s = np.asarray(data["state"])
        if data["tracers"] is not None:
            self.tracers = np.asarray(data["tracers"])
            self.tracer_frozen = np.asarray(data["tracer_frozen"], dtype=bool)


def euler_step(s, t, dt, F):
    """Forward Euler: s + dt * F(t, s)."""
    return s + dt * F


def step_euler(evolution, record=None):
    """Single forward-Euler step of an Evolution (spec-level operation)."""
    return evolution.step(record)
