"""Effective viscosity extraction and blow-up power-law fitting.

Two extraction routes for the instantaneous effective viscosity, defined
as the shear force per unit cell width transmitted through the bottom
wall, normalized by the shear rate:

* `mueff_wall` integrates the total traction directly along the bottom
  wall with a distance-adaptive composite Gauss-Legendre rule and close
  corrections; it requires that no particle (or image) intersects the
  wall.
* `mueff_deformed` rewrites the wall integral as far-field integrals over
  shifted walls against quadrant-shifted copies of the boundaries, plus a
  density integral over the upper-half nodes and the correction-field
  traction on the wall. All source-target distances are at least half a
  cell, so O(1) quadrature nodes suffice and the formula remains valid
  when particles straddle the wall.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .closeeval import build_near_correction, inside_mask
from .kernels import image_anchors, traction_matrix
from .periodize import gauss_legendre_01


def _wall_line(lat, shift=(0.0, 0.0), s=None):
    """Points on (D + shift) at parameters s in [0, 1], with up normal."""
    s = np.atleast_1d(s)
    base = lat.wall_points("D", s)
    return base + np.asarray(shift, dtype=float)[:, None]


def _up_normal(lat):
    n = -lat.wall_normal("D")
    return n / np.linalg.norm(n)


def wall_clearance(sol, shift=(0.0, 0.0)):
    """Minimum distance from the (shifted) bottom wall to any image curve;
    negative when a body intersects the wall."""
    ctx = sol.ctx
    s = np.linspace(0.0, 1.0, 257)
    pts = _wall_line(ctx.lat, shift, s)
    d = np.inf
    for j, b in enumerate(ctx.bodies):
        for sv in ctx.image_shifts[j]:
            dx = pts[0][:, None] - (b.x[0] + sv[0])
            dy = pts[1][:, None] - (b.x[1] + sv[1])
            d = min(d, float(np.sqrt(dx * dx + dy * dy).min()))
            if inside_mask(b, pts, shift=sv).any():
                return -d
    return d


def _adaptive_panels(ctx, shift, min_panel=1e-3):
    """Panel subdivision of the wall driven by distance to the boundaries."""
    pts_all = ctx.exp_pts
    if pts_all.shape[1] == 0:
        return [(0.0, 1.0)]
    length = ctx.lat.wall_length("D")

    def dist(s):
        p = _wall_line(ctx.lat, shift, np.atleast_1d(s))
        dx = p[0][:, None] - pts_all[0]
        dy = p[1][:, None] - pts_all[1]
        return np.sqrt(dx * dx + dy * dy).min()

    panels = []
    stack = [(0.0, 1.0)]
    while stack:
        a, b = stack.pop()
        mid = 0.5 * (a + b)
        d = min(dist(a), dist(mid), dist(b))
        if (b - a) * length > max(2.0 * d, min_panel):
            stack.extend([(a, mid), (mid, b)])
        else:
            panels.append((a, b))
    return sorted(panels)


def mueff_wall(sol, p_per_panel=12, shift=(0.0, 0.0)):
    """Effective viscosity from the bottom-wall force integral.

    Raises if a particle or image intersects the wall (use mueff_deformed
    then). `shift` moves the integration line by a lattice vector, which
    leaves the result unchanged; it exists for translation-covariance
    tests.
    """
    ctx = sol.ctx
    lat = ctx.lat
    clear = wall_clearance(sol, shift)
    if clear <= 0.0:
        raise RuntimeError("a particle intersects the wall; "
                           "use the deformed-contour extraction")
    xg, wg = gauss_legendre_01(p_per_panel)
    svals, weights = [], []
    for a, b in _adaptive_panels(ctx, shift):
        svals.append(a + (b - a) * xg)
        weights.append(wg * (b - a) * lat.wall_length("D"))
    svals = np.concatenate(svals)
    weights = np.concatenate(weights)
    pts = _wall_line(lat, shift, svals)
    nup = _up_normal(lat)
    normals = np.tile(nup[:, None], (1, pts.shape[1]))

    res = ctx.near_fields(sol.sigma, pts, ("T",), target_normals=normals)
    T = res["T"]
    corr = build_near_correction(ctx.bodies, ctx.image_shifts, pts, ctx.mu,
                                 target_normals=normals, want=("T",),
                                 cutoff_factor=ctx.opts.cutoff_factor,
                                 cutoff_cap=ctx.cutoff_cap,
                                 evaluators=ctx.evaluators,
                                 fine_cache=ctx.fine_cache)
    if not corr.empty:
        corr.accumulate("T", ctx.densities(sol.sigma), T)
    T += ctx.per.eval_matrices(pts, normals, want=("T",))["T"] @ sol.xi

    that = np.asarray(lat.e1) / lat.wall_length("D")
    tdotT = that[0] * T[:pts.shape[1]] + that[1] * T[pts.shape[1]:]
    pert = float(weights @ tdotT)
    background = ctx.mu * ctx.gamma * lat.wall_length("D")
    return (pert + background) / (ctx.gamma * lat.wall_length("D"))


def _anchored_pieces(ctx):
    """Per-node anchor shifts of the 2x2 image blocks and the set of nodes
    whose anchored copies are enclosed by the deformed two-cell loop.

    A node is enclosed when its anchored vertical coordinate lies below the
    deformed bottom contour, which threads just under the lowest boundary
    point; with nothing straddling the bottom/top walls this reduces to
    "all nodes in the upper half of the cell".
    """
    lat = ctx.lat
    if ctx.N == 0:
        return np.zeros((2, 0)), np.zeros(0, dtype=bool)
    m0, n0, ab = image_anchors(ctx.nodes, lat)
    e1 = np.asarray(lat.e1)
    e2 = np.asarray(lat.e2)
    shifts = m0[None, :] * e1[:, None] + n0[None, :] * e2[:, None]
    b = ab[1]
    b_min = b.min()
    enclosed = (n0 == -1) & (b < 1.0 + b_min)
    return shifts, enclosed


def _graded_panels(levels=9, min_panel=2.0**-12):
    """Dyadically graded panels of [0, 1] toward both endpoints."""
    cuts = [0.0]
    lo = max(min_panel, 2.0**-(levels + 1))
    edges = [lo * 2**k for k in range(levels + 1) if lo * 2**k < 0.5]
    cuts.extend(edges)
    cuts.append(0.5)
    cuts.extend(sorted(1.0 - np.asarray(cuts[1:-1])))
    cuts.append(1.0)
    return np.unique(np.asarray(cuts))


def mueff_deformed(sol, n_wall=8, grade_levels=9):
    """Effective viscosity by the far-field contour-deformation identity.

    All source-target pairs are separated by a finite fraction of the
    cell; panels graded toward the wall endpoints keep the quadrature
    spectral even when anchored pieces sit near a wall corner.
    """
    ctx = sol.ctx
    lat = ctx.lat
    e1 = np.asarray(lat.e1)
    e2 = np.asarray(lat.e2)
    shifts, enclosed = _anchored_pieces(ctx)
    src = ctx.nodes + shifts
    w = ctx.node_weights
    f = np.concatenate([sol.sigma[:ctx.N] * w, sol.sigma[ctx.N:] * w])

    xg, wg = gauss_legendre_01(n_wall)
    cuts = _graded_panels(grade_levels)
    svals = np.concatenate([a + (b - a) * xg for a, b in zip(cuts, cuts[1:])])
    wvals = np.concatenate([(b - a) * wg for a, b in zip(cuts, cuts[1:])])
    nq = svals.size

    def wall_integral(mat_src, wall, shift, normal):
        pts = lat.wall_points(wall, svals) + np.asarray(shift)[:, None]
        nn = np.tile(np.asarray(normal)[:, None], (1, nq))
        if mat_src is None:
            T = ctx.per.eval_matrices(pts, nn, want=("T",))["T"] @ sol.xi
        else:
            T = traction_matrix(pts, nn, mat_src) @ f
        wt = wvals * lat.wall_length(wall)
        return np.array([wt @ T[:nq], wt @ T[nq:]])

    n_lr = lat.wall_normal("L")
    n_up = _up_normal(lat)
    total = np.zeros(2)
    if ctx.N:
        total += wall_integral(src, "R", -e2, n_lr)
        total -= wall_integral(src, "L", -e1 - e2, n_lr)
        total += 2.0 * wall_integral(src, "D", -e1 - e2, n_up)
        total += 2.0 * wall_integral(src, "D", -e2, n_up)
        total -= np.array([w[enclosed] @ sol.sigma[:ctx.N][enclosed],
                           w[enclosed] @ sol.sigma[ctx.N:][enclosed]])
    total += wall_integral(None, "D", (0.0, 0.0), n_up)

    that = e1 / lat.wall_length("D")
    pert = that @ total
    return float(ctx.mu + pert / (ctx.gamma * lat.wall_length("D")))


@dataclass
class PowerLawFit:
    c: float
    t_star: float
    beta: float
    residual: float


def fit_power_law(times, values, window=None, search_span=1.5):
    """Fit mu_eff(t) ~ c |t - t*|^(-beta) on the given time window.

    Linear least squares in (log c, beta) for each candidate t*, with t*
    line-searched beyond the last sample. The residual is the rms of the
    log-scale misfit, which makes it scale-invariant in the values.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, v = t[keep], v[keep]
    if t.size < 10:
        raise ValueError("need at least 10 samples in the fit window")
    if np.any(v <= 0):
        raise ValueError("power-law fit needs positive values")
    tail = v[-max(3, t.size // 4):]
    if not np.all(np.diff(tail) > 0):
        raise ValueError("tail of the window is not monotone increasing")

    logv = np.log(v)
    t_end = t[-1]
    dt_min = np.min(np.diff(t))

    def inner(ts):
        x = np.log(ts - t)
        A = np.vstack([np.ones_like(x), -x]).T
        coef, *_ = np.linalg.lstsq(A, logv, rcond=None)
        r = A @ coef - logv
        return coef, float(np.sqrt(np.mean(r * r)))

    def objective(ts):
        return inner(ts)[1]

    span = search_span * (t[-1] - t[0] + dt_min)
    res = minimize_scalar(objective, bounds=(t_end + 0.1 * dt_min, t_end + span),
                          method="bounded",
                          options={"xatol": 1e-12})
    if not res.success:
        raise RuntimeError("power-law fit did not converge")
    (logc, beta), resid = inner(res.x)
    return PowerLawFit(c=float(np.exp(logc)), t_star=float(res.x),
                       beta=float(beta), residual=resid)


@dataclass
class RheologyRecord:
    """Time series of effective viscosity samples with method tags."""

    times: list = field(default_factory=list)
    values: list = field(default_factory=list)
    methods: list = field(default_factory=list)
    fit: PowerLawFit = None

    def append(self, t, value, method):
        self.times.append(float(t))
        self.values.append(float(value))
        self.methods.append(method)

    def fit_blowup(self, window=None):
        self.fit = fit_power_law(self.times, self.values, window=window)
        return self.fit
