"""Skew lattice, particle shapes, spectral boundary discretizations, and
random suspension generation.

Conventions used throughout the package:

* the unit cell is ``{center + a*e1 + b*e2 : a, b in [-1/2, 1/2]}`` with
  ``e1 = (1, 0)`` always,
* boundaries are parametrized counterclockwise by ``theta in [0, 2*pi)``
  and discretized at equispaced parameters (periodic trapezoid rule),
* outward unit normals, positive curvature for convex bodies.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize


def round_half_away(x):
    """Round to nearest integer, ties away from zero (unlike np.round)."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class Lattice:
    """Skew lattice defined by cell vectors e1, e2 and a cell center.

    Walls are named L, R, U, D; R = L + e1 and U = D + e2 pointwise.
    The expanded cell has the same center, parallel walls, doubled sides.
    """

    e1: tuple = (1.0, 0.0)
    e2: tuple = (0.0, 1.0)
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "e1", tuple(float(v) for v in self.e1))
        object.__setattr__(self, "e2", tuple(float(v) for v in self.e2))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if abs(self.det) < 1e-14:
            raise ValueError("lattice vectors are linearly dependent")

    @property
    def E(self):
        """2x2 matrix [e1 e2] (columns)."""
        return np.array([[self.e1[0], self.e2[0]], [self.e1[1], self.e2[1]]])

    @property
    def det(self):
        return self.e1[0] * self.e2[1] - self.e1[1] * self.e2[0]

    @property
    def cell_area(self):
        return abs(self.det)

    def lattice_coords(self, points):
        """Map physical points (2, n) to lattice coordinates (2, n)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if p.shape[0] != 2:
            p = p.T
        rel = p - np.asarray(self.center)[:, None]
        return np.linalg.solve(self.E, rel)

    def from_lattice_coords(self, ab):
        ab = np.asarray(ab, dtype=float)
        return self.E @ ab + np.asarray(self.center)[:, None]

    def wrap_point(self, x):
        """Translate x by lattice vectors so its lattice coords lie in [-1/2, 1/2)."""
        a, b = self.lattice_coords(np.asarray(x)[:, None])[:, 0]
        sa = np.floor(a + 0.5)
        sb = np.floor(b + 0.5)
        e1 = np.asarray(self.e1)
        e2 = np.asarray(self.e2)
        return np.asarray(x, dtype=float) - sa * e1 - sb * e2

    def wall_points(self, wall, s):
        """Points on a wall; s in [0, 1] runs along the wall.

        L: center - e1/2 + (s - 1/2) e2     R: L + e1
        D: center - e2/2 + (s - 1/2) e1     U: D + e2
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        c = np.asarray(self.center)[:, None]
        e1 = np.asarray(self.e1)[:, None]
        e2 = np.asarray(self.e2)[:, None]
        t = s[None, :] - 0.5
        if wall == "L":
            return c - e1 / 2 + t * e2
        if wall == "R":
            return c + e1 / 2 + t * e2
        if wall == "D":
            return c - e2 / 2 + t * e1
        if wall == "U":
            return c + e2 / 2 + t * e1
        raise ValueError(f"unknown wall {wall!r}")

    def wall_normal(self, wall):
        """Unit outward normal of the cell on the given wall."""
        e1 = np.asarray(self.e1)
        e2 = np.asarray(self.e2)
        if wall in ("L", "R"):
            n = np.array([-e2[1], e2[0]])  # perp(e2), points away from increasing a
            n = n / np.linalg.norm(n)
            return n if wall == "L" else -n
        if wall in ("D", "U"):
            n = np.array([e1[1], -e1[0]])
            n = n / np.linalg.norm(n)
            return n if wall == "D" else -n
        raise ValueError(f"unknown wall {wall!r}")

    def wall_length(self, wall):
        v = self.e2 if wall in ("L", "R") else self.e1
        return float(np.hypot(*v))


def lattice_at_time(t, gamma, center=(0.0, 0.0)):
    """Sheared lattice at time t: e1 = (1,0), e2 = (gamma*t - round(gamma*t), 1).

    Rounding is half-away-from-zero, which keeps |skew| <= 1/2.
    """
    if not np.isfinite(gamma):
        raise ValueError("shear rate must be finite")
    gt = gamma * t
    skew = gt - float(round_half_away(gt))
    return Lattice(e1=(1.0, 0.0), e2=(skew, 1.0), center=center)


class ParticleShape:
    """Base for closed smooth shapes parametrized ccw by theta in [0, 2pi)."""

    def body_frame(self, theta):
        """Return (x, dx, ddx), each (2, n), in the body frame."""
        raise NotImplementedError

    def boundary(self, theta, center, angle):
        """Boundary curve and derivatives after rotation + translation."""
        x, dx, ddx = self.body_frame(theta)
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s], [s, c]])
        return (R @ x + np.asarray(center)[:, None], R @ dx, R @ ddx)

    def max_radius(self):
        th = np.linspace(0, 2 * np.pi, 720, endpoint=False)
        x, _, _ = self.body_frame(th)
        return float(np.max(np.hypot(x[0], x[1])))


@dataclass(frozen=True)
class EllipseShape(ParticleShape):
    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("ellipse semi-axes must be positive")

    def body_frame(self, theta):
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        x = np.vstack([self.a * np.cos(th), self.b * np.sin(th)])
        dx = np.vstack([-self.a * np.sin(th), self.b * np.cos(th)])
        ddx = -x
        return x, dx, ddx


@dataclass(frozen=True)
class StarShape(ParticleShape):
    """r(theta) = s * (1 + amplitude * cos(frequency*theta + phase))."""

    s: float
    amplitude: float = 0.0
    frequency: int = 0
    phase: float = 0.0

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("star scale must be positive")
        if abs(self.amplitude) >= 1.0:
            raise ValueError("star radius must stay positive (|amplitude| < 1)")

    def radius(self, theta):
        return self.s * (1.0 + self.amplitude * np.cos(self.frequency * theta + self.phase))

    def body_frame(self, theta):
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        w, ph, s, a = self.frequency, self.phase, self.s, self.amplitude
        r = s * (1.0 + a * np.cos(w * th + ph))
        rp = -s * a * w * np.sin(w * th + ph)
        rpp = -s * a * w * w * np.cos(w * th + ph)
        ct, st = np.cos(th), np.sin(th)
        x = np.vstack([r * ct, r * st])
        dx = np.vstack([rp * ct - r * st, rp * st + r * ct])
        ddx = np.vstack([rpp * ct - 2 * rp * st - r * ct,
                         rpp * st + 2 * rp * ct - r * st])
        return x, dx, ddx


@dataclass
class ParticleState:
    """Rigid configuration and velocity of one particle.

    The angle is stored unwrapped; velocities are filled in by the solver.
    """

    center: np.ndarray
    angle: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    angular_velocity: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).copy()
        self.velocity = np.asarray(self.velocity, dtype=float).copy()


class BoundaryDiscretization:
    """Periodic-trapezoid discretization of one closed boundary.

    Carries nodes, arclength weights, unit tangents/normals, analytic
    curvature, and complex views used by the close-evaluation quadratures.
    """

    def __init__(self, shape, state, n):
        if n < 16 or n % 2:
            raise ValueError("need even N >= 16")
        self.shape = shape
        self.state = state
        self.n = n
        self.theta = 2 * np.pi * np.arange(n) / n
        self.dt = 2 * np.pi / n
        x, dx, ddx = shape.boundary(self.theta, state.center, state.angle)
        if isinstance(shape, StarShape) and np.any(shape.radius(self.theta) <= 0):
            raise ValueError("star radius must be positive at all parameters")
        self.x = x
        self.xp = dx
        self.xpp = ddx
        self.speed = np.hypot(dx[0], dx[1])
        self.tangent = dx / self.speed
        self.normal = np.vstack([self.tangent[1], -self.tangent[0]])
        self.curvature = (dx[0] * ddx[1] - dx[1] * ddx[0]) / self.speed**3
        self.weights = self.dt * self.speed
        # complex views (x + i y) for Cauchy-based quadratures
        self.c = x[0] + 1j * x[1]
        self.cp = dx[0] + 1j * dx[1]
        self.complex_weights = self.dt * self.cp
        self.h = float(np.max(self.weights))
        self.perimeter = float(np.sum(self.weights))

    @property
    def centroid(self):
        return (self.x * self.weights).sum(axis=1) / self.perimeter

    def translated(self, shift):
        """Cheap copy of this discretization shifted by a lattice vector."""
        out = object.__new__(BoundaryDiscretization)
        out.__dict__.update(self.__dict__)
        shift = np.asarray(shift, dtype=float)
        out.x = self.x + shift[:, None]
        out.c = self.c + (shift[0] + 1j * shift[1])
        out.state = ParticleState(self.state.center + shift, self.state.angle,
                                  self.state.velocity, self.state.angular_velocity)
        return out


def discretize(shape, state, n):
    """Spectral discretization of a particle boundary with n nodes."""
    return BoundaryDiscretization(shape, state, n)


def centroid(bd):
    """Arclength-weighted centroid of a discretized boundary."""
    return bd.centroid


class Suspension:
    """A list of discretized particles living in one unit cell."""

    def __init__(self, shapes, states, ns):
        if not (len(shapes) == len(states) == len(ns)):
            raise ValueError("shapes, states, ns must have equal length")
        self.shapes = list(shapes)
        self.states = list(states)
        self.ns = list(ns)
        self.bodies = [discretize(sh, st, n) for sh, st, n in zip(shapes, states, ns)]

    def __len__(self):
        return len(self.bodies)

    def with_states(self, states):
        return Suspension(self.shapes, states, self.ns)

    @property
    def total_nodes(self):
        return sum(b.n for b in self.bodies)


def _pair_min_distance(bd_i, bd_j, shift):
    """Min distance between body i and body j translated by shift.

    Node-pair minimum refined by Nelder-Mead over the two parameters.
    Returns a negative value when one boundary penetrates the other.
    """
    shift = np.asarray(shift, dtype=float)
    xj = bd_j.x + shift[:, None]
    dx = bd_i.x[0][:, None] - xj[0]
    dy = bd_i.x[1][:, None] - xj[1]
    d2 = dx * dx + dy * dy
    k = np.unravel_index(np.argmin(d2), d2.shape)
    t0 = np.array([bd_i.theta[k[0]], bd_j.theta[k[1]]])

    sh_i, st_i = bd_i.shape, bd_i.state
    sh_j, st_j = bd_j.shape, bd_j.state
    cj = st_j.center + shift

    def f(t):
        xi = sh_i.boundary(t[:1], st_i.center, st_i.angle)[0][:, 0]
        xjv = sh_j.boundary(t[1:], cj, st_j.angle)[0][:, 0]
        return np.hypot(*(xi - xjv))

    res = minimize(f, t0, method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 400})
    d = min(float(np.sqrt(d2[k])), float(res.fun))

    # penetration test: sign of the gap along body j's outward normal at
    # the refined closest point (robust at any separation, unlike a
    # discrete winding number within a node spacing of the curve)
    t_i, t_j = (res.x if res.fun <= np.sqrt(d2[k]) else t0)
    pi = sh_i.boundary(np.array([t_i]), st_i.center, st_i.angle)[0][:, 0]
    pj, dj, _ = sh_j.boundary(np.array([t_j]), cj, st_j.angle)
    nj = np.array([dj[1, 0], -dj[0, 0]])
    if (pi - pj[:, 0]) @ nj < 0.0:
        return -d
    return d


def min_separation(susp, lat):
    """Minimum boundary-to-boundary distance over all pairs and 3x3 images.

    Zero or negative return signals an overlap.
    """
    e1 = np.asarray(lat.e1)
    e2 = np.asarray(lat.e2)
    bodies = susp.bodies
    centers = [b.centroid for b in bodies]
    radii = [float(np.max(np.hypot(*(b.x - c[:, None])))) for b, c in zip(bodies, centers)]
    best = np.inf
    shifts = [m * e1 + n * e2 for m in (-1, 0, 1) for n in (-1, 0, 1)]
    for i in range(len(bodies)):
        for j in range(i, len(bodies)):
            for s in shifts:
                if i == j and np.allclose(s, 0):
                    continue
                gap_bound = np.hypot(*(centers[i] - centers[j] - s)) - radii[i] - radii[j]
                if gap_bound > best:
                    continue
                d = _pair_min_distance(bodies[i], bodies[j], s)
                best = min(best, d)
    return float(best)


def generate_random_suspension(count, seed, lat=None, n_nodes=64,
                               area_fraction=0.25, amplitude_range=(0.0, 0.5),
                               frequencies=(2, 3, 4, 5), size_ratio=4.0,
                               gap_factor=0.5, max_attempts_per_body=400):
    """Place `count` random star bodies in the unit cell without overlaps.

    Star radii follow r(theta) = s(1 + a cos(w theta + phi)) with
    a ~ U[amplitude_range], phi ~ U[0, 2pi), w uniform over `frequencies`,
    and base sizes spanning `size_ratio`; sizes are then rescaled so the
    bodies fill `area_fraction` of the cell. Pairs closer than
    gap_factor * h of the finer body (h = max node spacing) are redrawn.
    Deterministic for a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lat = lat or Lattice(center=(0.5, 0.5))
    rng = np.random.default_rng(seed)

    amps = rng.uniform(*amplitude_range, size=count)
    phases = rng.uniform(0.0, 2 * np.pi, size=count)
    freqs = rng.choice(np.asarray(frequencies), size=count)
    sizes = rng.uniform(1.0, size_ratio, size=count)
    # mean of r^2 over theta gives the enclosed area of a star
    areas = np.pi * sizes**2 * (1.0 + 0.5 * amps**2)
    scale = np.sqrt(area_fraction * lat.cell_area / np.sum(areas))
    sizes *= scale

    shapes = [StarShape(s=float(sizes[k]), amplitude=float(amps[k]),
                        frequency=int(freqs[k]), phase=float(phases[k]))
              for k in range(count)]

    e1 = np.asarray(lat.e1)
    e2 = np.asarray(lat.e2)
    shifts = [m * e1 + n * e2 for m in (-1, 0, 1) for n in (-1, 0, 1)]
    placed = []
    bds = []
    for k in range(count):
        ok = False
        for _ in range(max_attempts_per_body):
            ab = rng.uniform(-0.5, 0.5, size=2)
            center = lat.from_lattice_coords(ab[:, None])[:, 0]
            state = ParticleState(center=center, angle=0.0)
            bd = discretize(shapes[k], state, n_nodes)
            gap = gap_factor * bd.h
            good = True
            for prev in bds:
                thresh = gap_factor * min(bd.h, prev.h)
                for s in shifts:
                    cd = np.hypot(*(bd.centroid - prev.centroid - s))
                    if cd > shapes[k].max_radius() + prev.shape.max_radius() + thresh + 0.05:
                        continue
                    if _pair_min_distance(bd, prev, s) < thresh:
                        good = False
                        break
                if not good:
                    break
            if good:  # also guard against own images
                for s in shifts:
                    if np.allclose(s, 0):
                        continue
                    if _pair_min_distance(bd, bd, s) < gap:
                        good = False
                        break
            if good:
                placed.append(state)
                bds.append(bd)
                ok = True
                break
        if not ok:
            raise RuntimeError(
                f"could not place body {k + 1}/{count} after "
                f"{max_attempts_per_body} attempts; lower area_fraction")
    return Suspension(shapes, placed, [n_nodes] * count)
