"""Periodized second-kind mobility boundary integral equation.

Unknown: a single-layer density sigma on all particle boundaries, stored
globally component-stacked: sigma = [all x-components (N); all y-components
(N)] with bodies occupying contiguous node ranges. The operator applied by
the Krylov solver is

    (1/2) I + K + L,

with K the periodized single-layer traction at all nodes (near-image sums
with on-surface diagonal limits and sparse close corrections, plus the
proxy-field correction traction) and L the rank-3-per-body completion
encoding the zero net force/torque constraints. The constant-normal
indeterminacy of the periodic traction kernel is removed by subtracting
(T(x1) . n(x1)) n(x), x1 being the first node of the first body, which
stops GMRES from stagnating.

Right-hand side: -T(u0, p0) for the background shear u0 = (gamma x2, 0).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator
from scipy.sparse.linalg import gmres as _scipy_gmres

from .closeeval import (LaplaceCloseEvaluator, build_near_correction,
                        inside_mask, nystrom_diag_limit,
                        stokes_slp_self_matrix, stokes_traction_self_matrix)
from .geometry import min_separation
from .kernels import (DEFAULT_BACKEND, image_anchors, stokeslet_matrix,
                      traction_matrix)
from .periodize import Discrepancy, build_periodizer, modified_discrepancy

log = logging.getLogger("shearcell")


def background_velocity(points, gamma):
    """Background shear u0 = (gamma x2, 0), stacked (2T,)."""
    return np.concatenate([gamma * points[1], np.zeros(points.shape[1])])


def _zero_diag_stokeslet_self(bd, mu):
    """Naive self Stokeslet matrix with the singular diagonal zeroed."""
    n = bd.n
    dxx = bd.x[0][:, None] - bd.x[0]
    dyy = bd.x[1][:, None] - bd.x[1]
    r2 = dxx * dxx + dyy * dyy
    np.fill_diagonal(r2, 1.0)
    ir2 = 1.0 / r2
    logr = 0.5 * np.log(r2)
    c = 1.0 / (4 * np.pi * mu)
    A = np.empty((2 * n, 2 * n))
    A[:n, :n] = c * (-logr + dxx * dxx * ir2)
    A[:n, n:] = c * (dxx * dyy * ir2)
    A[n:, :n] = A[:n, n:]
    A[n:, n:] = c * (-logr + dyy * dyy * ir2)
    idx = np.arange(n)
    for blk in (A[:n, :n], A[:n, n:], A[n:, :n], A[n:, n:]):
        blk[idx, idx] = 0.0
    return A * np.concatenate([bd.weights, bd.weights])[None, :]


def background_traction(normals, mu, gamma):
    """Traction of (u0, p0) on a surface with unit normals: mu gamma (n2, n1)."""
    return mu * gamma * np.concatenate([normals[1], normals[0]])


@dataclass
class SolverOptions:
    gmres_tol: float = 1e-10
    max_iter: int = 500
    m: int = 32
    n_proxy: int = 128
    truncation: float = 1e-14
    cutoff_factor: float = 10.0
    dense_cap: int = 3200
    check_overlap: bool = True
    backend: object = None


@dataclass
class MobilitySolution:
    sigma: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    rigid_residual: float
    iterations: int
    gmres_residual: float
    periodizer_residual: float
    consistency: np.ndarray
    xi: np.ndarray
    surface_velocity: np.ndarray = field(repr=False, default=None)
    ctx: object = field(repr=False, default=None)

    @property
    def state_derivative(self):
        """d/dt of (centers..., angles...) as one flat vector."""
        return np.concatenate([self.v.ravel(), self.omega])


class MobilityContext:
    """Geometry-dependent precomputation shared by operator applications."""

    def __init__(self, susp, lat, mu, gamma, opts=None):
        self.susp = susp
        self.lat = lat
        self.mu = mu
        self.gamma = gamma
        self.opts = opts or SolverOptions()
        self.backend = self.opts.backend or DEFAULT_BACKEND
        self.bodies = susp.bodies
        self.K = len(self.bodies)
        counts = [b.n for b in self.bodies]
        self.starts = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self.N = int(self.starts[-1])

        if self.K:
            self.nodes = np.hstack([b.x for b in self.bodies])
            self.node_normals = np.hstack([b.normal for b in self.bodies])
            self.node_weights = np.concatenate([b.weights for b in self.bodies])
        else:
            self.nodes = np.zeros((2, 0))
            self.node_normals = np.zeros((2, 0))
            self.node_weights = np.zeros(0)

        self._expand_images()
        self.evaluators = [LaplaceCloseEvaluator(b) for b in self.bodies]
        self.per = build_periodizer(lat, m=self.opts.m,
                                    n_proxy=self.opts.n_proxy, mu=mu,
                                    truncation=self.opts.truncation)

        xl, xr, xd, xu = self.per.wall_targets()
        self.wall_targets = np.hstack([xl, xr, xd, xu])
        m = self.per.m
        self.wall_normals = np.hstack([
            np.tile(self.per.nL[:, None], (1, 2 * m)),
            np.tile(self.per.nD[:, None], (1, 2 * m))])

        # Wall data needs no close corrections: paired-wall differences
        # cancel the close image terms exactly, node by node, leaving only
        # separations of at least half a cell.
        cf = self.opts.cutoff_factor
        self.cutoff_cap = 0.25 * min(np.hypot(*lat.e1), np.hypot(*lat.e2))
        self.fine_cache = {}

        def drop_own_nodes(j, s, idx):
            # a body's zero-shift interaction with its own nodes is handled
            # by the on-surface rules, not by close evaluation
            if np.hypot(*s) != 0.0:
                return idx
            sl = self.body_slice(j)
            return idx[(idx < sl.start) | (idx >= sl.stop)]

        self.corr_nodes = build_near_correction(
            self.bodies, self.image_shifts, self.nodes, mu,
            target_normals=self.node_normals, want=("u", "T"),
            cutoff_factor=cf, cutoff_cap=self.cutoff_cap,
            exclude=drop_own_nodes,
            evaluators=self.evaluators, fine_cache=self.fine_cache)
        self._gauge_target = self._farthest_fluid_point()

        prox = self.per.eval_matrices(self.nodes, self.node_normals,
                                      want=("u", "T"))
        self.prox_u = prox["u"]
        self.prox_T = prox["T"]
        self.prox_u_gauge = self.per.eval_matrices(self._gauge_target,
                                                   want=("u",))["u"]

        self.use_dense = 0 < self.N <= self.opts.dense_cap
        if self.use_dense:
            self._dense = self._assemble_dense_operator()
        else:
            self._diag_T = [nystrom_diag_limit(b) for b in self.bodies]

    # -- image bookkeeping ---------------------------------------------------

    def _expand_images(self):
        """Per-node lattice images, grouped by (body, shift).

        Close corrections are flagged over each body's full set of shifts
        and always use whole-curve blocks: for a target near a partial
        image (shift carried by a subset I of nodes), the needed correction
        exact_I - naive_I equals close_whole - naive_whole up to the
        quadrature error of the far complement piece, which sits at least
        half a cell away from any flagged target.
        """
        e1 = np.asarray(self.lat.e1)
        e2 = np.asarray(self.lat.e2)
        self.groups = []        # (body j, shift vector, node indices in body)
        self.image_shifts = []  # per body, all shift vectors (whole or not)
        pts, parent = [], []
        for j, b in enumerate(self.bodies):
            m0, n0, _ = image_anchors(b.x, self.lat)
            by_shift = {}
            for k in range(b.n):
                for dm in (0, 1):
                    for dn in (0, 1):
                        by_shift.setdefault((m0[k] + dm, n0[k] + dn),
                                            []).append(k)
            vecs = []
            for s, idx in sorted(by_shift.items()):
                vec = s[0] * e1 + s[1] * e2
                idx = np.asarray(idx)
                self.groups.append((j, vec, idx))
                vecs.append(vec)
                gl = self.starts[j] + idx
                for g, kk in zip(gl, idx):
                    pts.append(b.x[:, kk] + vec)
                    parent.append(g)
            self.image_shifts.append(vecs)
        self.exp_pts = np.array(pts).T if pts else np.zeros((2, 0))
        self.exp_parent = np.asarray(parent, dtype=int)

    def body_slice(self, j):
        return slice(self.starts[j], self.starts[j + 1])

    def body_density(self, sigma, j):
        """Per-body stacked [sx; sy] from the global stacked vector."""
        sl = self.body_slice(j)
        return np.concatenate([sigma[sl.start:sl.stop],
                               sigma[self.N + sl.start:self.N + sl.stop]])

    def densities(self, sigma):
        return [self.body_density(sigma, j) for j in range(self.K)]

    # -- single-layer sums over near images ----------------------------------

    def _expanded_strengths(self, sigma):
        w = self.node_weights
        fx = (sigma[:self.N] * w)[self.exp_parent]
        fy = (sigma[self.N:] * w)[self.exp_parent]
        return np.concatenate([fx, fy])

    def near_fields(self, sigma, targets, want, target_normals=None):
        """Near-image sums at arbitrary targets (coincident pairs skipped)."""
        return self.backend.sum(targets, self.exp_pts,
                                self._expanded_strengths(sigma), self.mu,
                                want=want, target_normals=target_normals)

    def _diag_traction(self, sigma):
        """Diagonal-limit contributions of the on-surface traction."""
        out = np.zeros(2 * self.N)
        for j, b in enumerate(self.bodies):
            d = self._diag_T[j]
            sl = self.body_slice(j)
            sx = sigma[sl.start:sl.stop]
            sy = sigma[self.N + sl.start:self.N + sl.stop]
            w = b.weights
            out[sl.start:sl.stop] += (d[:, 0, 0] * sx + d[:, 0, 1] * sy) * w
            out[self.N + sl.start:self.N + sl.stop] += \
                (d[:, 1, 0] * sx + d[:, 1, 1] * sy) * w
        return out

    # -- wall discrepancy -----------------------------------------------------

    def _fold_walls(self, uw, tw):
        """Stack wall values [L R D U] into the discrepancy vector."""
        m = self.per.m
        q = 4 * m
        ux, uy = uw[:q], uw[q:]
        tx, ty = tw[:q], tw[q:]
        return np.concatenate([
            ux[m:2 * m] - ux[0:m], uy[m:2 * m] - uy[0:m],
            tx[m:2 * m] - tx[0:m], ty[m:2 * m] - ty[0:m],
            ux[3 * m:4 * m] - ux[2 * m:3 * m], uy[3 * m:4 * m] - uy[2 * m:3 * m],
            tx[3 * m:4 * m] - tx[2 * m:3 * m], ty[3 * m:4 * m] - ty[2 * m:3 * m]])

    def discrepancy(self, sigma):
        """Wall discrepancy of the near sums (exact pair cancellation makes
        plain summation spectrally accurate here)."""
        res = self.near_fields(sigma, self.wall_targets, ("u", "T"),
                               target_normals=self.wall_normals)
        return self._fold_walls(res["u"], res["T"])

    def net_force(self, sigma):
        w = self.node_weights
        return np.array([np.dot(w, sigma[:self.N]),
                         np.dot(w, sigma[self.N:])])

    def periodize_density(self, sigma):
        """Proxy coefficients for the modified discrepancy of sigma."""
        g = Discrepancy.from_stacked(self.discrepancy(sigma))
        gt = modified_discrepancy(self.per, g, self.net_force(sigma))
        d = gt.stacked()
        xi = self.per.apply_pinv(d)
        return xi, d

    # -- completion and nullspace fix ----------------------------------------

    def completion(self, sigma):
        """L sigma: per-body net-force and torque-moment completion terms."""
        out = np.zeros(2 * self.N)
        for j, b in enumerate(self.bodies):
            sl = self.body_slice(j)
            sx = sigma[sl.start:sl.stop]
            sy = sigma[self.N + sl.start:self.N + sl.stop]
            w = b.weights
            F = np.array([w @ sx, w @ sy])
            c = b.centroid
            rx = b.x[0] - c[0]
            ry = b.x[1] - c[1]
            tq = w @ (-ry * sx + rx * sy)
            out[sl.start:sl.stop] += F[0] + (-ry) * tq
            out[self.N + sl.start:self.N + sl.stop] += F[1] + rx * tq
        return out

    def _nullspace_fix(self, T):
        """Subtract (T(x1).n(x1)) n(x) at every node, x1 = first node."""
        n1 = self.node_normals[:, 0]
        alpha = T[0] * n1[0] + T[self.N] * n1[1]
        T[:self.N] -= alpha * self.node_normals[0]
        T[self.N:] -= alpha * self.node_normals[1]
        return T

    # -- operator application -------------------------------------------------

    def traction_K(self, sigma):
        """Periodized SLP traction at all nodes (before the nullspace fix)."""
        if self.use_dense:
            return self._K_dense @ sigma
        res = self.near_fields(sigma, self.nodes, ("T",),
                               target_normals=self.node_normals)
        T = res["T"]
        T += self._diag_traction(sigma)
        if not self.corr_nodes.empty:
            self.corr_nodes.accumulate("T", self.densities(sigma), T)
        xi, _ = self.periodize_density(sigma)
        T += self.prox_T @ xi
        return T

    def apply(self, sigma):
        """(1/2 I + K + L) sigma with the traction nullspace fix."""
        if self.use_dense:
            return self._dense @ sigma
        T = self.traction_K(sigma)
        self._nullspace_fix(T)
        return 0.5 * sigma + T + self.completion(sigma)

    @property
    def rhs(self):
        return -background_traction(self.node_normals, self.mu, self.gamma)

    # -- dense assembly (small problems and the matvec oracle) ----------------

    def _scatter_block(self, A, rows, j, block, nrows):
        """Add a per-body-density block into global columns of body j."""
        sl = self.body_slice(j)
        nj = sl.stop - sl.start
        cols = np.concatenate([np.arange(sl.start, sl.stop),
                               self.N + np.arange(sl.start, sl.stop)])
        ridx = np.concatenate([rows, rows + nrows])
        A[np.ix_(ridx, cols)] += block

    def _assemble_wall_matrices(self):
        q = self.wall_targets.shape[1]
        Uw = np.zeros((2 * q, 2 * self.N))
        Tw = np.zeros((2 * q, 2 * self.N))
        for j, vec, idx in self.groups:
            b = self.bodies[j]
            src = b.x[:, idx] + vec[:, None]
            w = b.weights[idx]
            ublk = stokeslet_matrix(self.wall_targets, src, self.mu, weights=w)
            tblk = traction_matrix(self.wall_targets, self.wall_normals, src,
                                   weights=w)
            sl = self.body_slice(j)
            cols = np.concatenate([sl.start + idx, self.N + sl.start + idx])
            Uw[:, cols] += ublk
            Tw[:, cols] += tblk
        return Uw, Tw

    def _fold_wall_matrix(self, Uw, Tw):
        m = self.per.m
        q = 4 * m
        rows = []
        for blockm, lo in ((Uw, 0), (Tw, 0), (Uw, 2 * m), (Tw, 2 * m)):
            rows.append(blockm[lo + m:lo + 2 * m] - blockm[lo:lo + m])
            rows.append(blockm[q + lo + m:q + lo + 2 * m] -
                        blockm[q + lo:q + lo + m])
        return np.vstack(rows)

    def _g0_matrix(self):
        m = self.per.m
        G0 = np.zeros((8 * m, 2 * self.N))
        wrow = self.node_weights
        c2 = 1.0 / (2.0 * self.lat.wall_length("L"))
        c4 = 1.0 / (2.0 * self.lat.wall_length("D"))
        G0[2 * m:3 * m, :self.N] = c2 * wrow
        G0[3 * m:4 * m, self.N:] = c2 * wrow
        G0[6 * m:7 * m, :self.N] = c4 * wrow
        G0[7 * m:8 * m, self.N:] = c4 * wrow
        return G0

    def _assemble_dense_operator(self):
        n = self.N
        K = np.zeros((2 * n, 2 * n))
        all_nodes = np.arange(n)
        for j, vec, idx in self.groups:
            b = self.bodies[j]
            sl = self.body_slice(j)
            cols = np.concatenate([sl.start + idx, self.N + sl.start + idx])
            if np.hypot(*vec) == 0.0:
                blk = stokes_traction_self_matrix(b)
                rows = np.concatenate([np.arange(sl.start, sl.stop),
                                       n + np.arange(sl.start, sl.stop)])
                K[np.ix_(rows, rows)] += blk
                others = np.setdiff1d(all_nodes, np.arange(sl.start, sl.stop))
                if others.size:
                    blk2 = traction_matrix(self.nodes[:, others],
                                           self.node_normals[:, others],
                                           b.x[:, idx], weights=b.weights[idx])
                    rsub = np.concatenate([others, others + n])
                    K[np.ix_(rsub, cols)] += blk2
            else:
                src = b.x[:, idx] + vec[:, None]
                blk = traction_matrix(self.nodes, self.node_normals, src,
                                      weights=b.weights[idx])
                K[:, cols] += blk
        for j, blk in self.corr_nodes.blocks:
            self._scatter_block(K, blk.target_idx, j, blk.mats["T"], n)
        Uw, Tw = self._assemble_wall_matrices()
        Dw = self._fold_wall_matrix(Uw, Tw)
        Gt = self._g0_matrix() - Dw
        self._xi_mat = self.per.apply_pinv(Gt)
        K += self.prox_T @ self._xi_mat
        # nullspace fix as a rank-1 update
        n1 = self.node_normals[:, 0]
        k1 = n1[0] * K[0] + n1[1] * K[n]
        nstack = np.concatenate([self.node_normals[0], self.node_normals[1]])
        K -= np.outer(nstack, k1)
        self._K_dense_fixed = K
        self._K_dense = K + np.outer(nstack, k1)  # unfixed, for traction_K
        A = K.copy()
        A[np.diag_indices_from(A)] += 0.5
        # completion operator
        for j, b in enumerate(self.bodies):
            sl = self.body_slice(j)
            w = b.weights
            c = b.centroid
            rx = b.x[0] - c[0]
            ry = b.x[1] - c[1]
            rows_x = np.arange(sl.start, sl.stop)
            rows_y = n + rows_x
            cols_x = rows_x
            cols_y = rows_y
            A[np.ix_(rows_x, cols_x)] += w[None, :]
            A[np.ix_(rows_y, cols_y)] += w[None, :]
            A[np.ix_(rows_x, cols_x)] += np.outer(-ry, -ry * w)
            A[np.ix_(rows_x, cols_y)] += np.outer(-ry, rx * w)
            A[np.ix_(rows_y, cols_x)] += np.outer(rx, -ry * w)
            A[np.ix_(rows_y, cols_y)] += np.outer(rx, rx * w)
        return A

    def dense_operator(self):
        """Dense matrix of (1/2 I + K + L) with the nullspace fix."""
        if not self.use_dense:
            raise RuntimeError("problem exceeds the dense assembly cap")
        return self._dense

    # -- post-solve quantities -------------------------------------------------

    def _farthest_fluid_point(self):
        """Deterministic fluid point farthest from all boundary images;
        anchors the additive velocity gauge. Boundaries are sampled at a
        fixed parameter count so the chosen point does not depend on the
        solve resolution."""
        # grid over the canonical (skew-reduced) basis, so re-describing the
        # lattice by e2 +- e1 picks the same physical gauge point
        from .geometry import Lattice, round_half_away
        e1 = np.asarray(self.lat.e1)
        e2 = np.asarray(self.lat.e2)
        k = round_half_away(float(e2 @ e1) / float(e1 @ e1))
        lat_c = Lattice(e1=tuple(e1), e2=tuple(e2 - k * e1),
                        center=self.lat.center)
        g = (np.arange(32) + 0.5) / 32.0 - 0.5
        A, B = np.meshgrid(g, g, indexing="ij")
        pts = lat_c.from_lattice_coords(np.vstack([A.ravel(), B.ravel()]))
        if self.N == 0:
            return pts[:, :1]
        th = 2 * np.pi * np.arange(512) / 512
        ec1 = np.asarray(lat_c.e1)
        ec2 = np.asarray(lat_c.e2)
        dmin = np.full(pts.shape[1], np.inf)
        for j, b in enumerate(self.bodies):
            bx = b.shape.boundary(th, b.state.center, b.state.angle)[0]
            m0, n0, _ = image_anchors(bx, lat_c)
            for dm in (0, 1):
                for dn in (0, 1):
                    sx = bx[0] + (m0 + dm) * ec1[0] + (n0 + dn) * ec2[0]
                    sy = bx[1] + (m0 + dm) * ec1[1] + (n0 + dn) * ec2[1]
                    dx = pts[0][:, None] - sx
                    dy = pts[1][:, None] - sy
                    dmin = np.minimum(dmin,
                                      np.sqrt(dx * dx + dy * dy).min(axis=1))
        k = int(np.argmax(np.round(dmin, 9)))
        best = pts[:, [k]]
        # pair with the point reflected through the cell center when that
        # is also comfortably in the fluid, so the gauge respects the
        # configuration's point symmetry
        mirror = 2 * np.asarray(self.lat.center)[:, None] - best
        km = int(np.argmin(np.hypot(*(pts - mirror))))
        if dmin[km] >= 0.8 * dmin[k]:
            return np.hstack([best, pts[:, [km]]])
        return best

    def velocity_gauge(self, sigma, xi):
        """Additive velocity constant: the perturbation field is defined
        only up to a constant, which is pinned so its mean over the gauge
        targets (a fluid point far from all boundaries, paired with its
        reflection through the cell center when possible) vanishes. The
        functional depends only on the total field, not on the
        near/correction split, so reported velocities converge with
        resolution.
        """
        u = self.near_fields(sigma, self._gauge_target, ("u",))["u"]
        u += self.prox_u_gauge @ xi
        k = self._gauge_target.shape[1]
        return np.array([u[:k].mean(), u[k:].mean()])

    def surface_velocity(self, sigma, xi):
        """Total velocity u0 + S_per[sigma] at all boundary nodes."""
        res = self.near_fields(sigma, self.nodes, ("u",))
        u = res["u"]
        # Kress on-surface correction replaces the skipped/naive self terms
        for j, b in enumerate(self.bodies):
            sl = self.body_slice(j)
            selfmat = stokes_slp_self_matrix(b, self.mu)
            naive = _zero_diag_stokeslet_self(b, self.mu)
            corr = (selfmat - naive) @ self.body_density(sigma, j)
            nj = b.n
            u[sl.start:sl.stop] += corr[:nj]
            u[self.N + sl.start:self.N + sl.stop] += corr[nj:]
        if not self.corr_nodes.empty:
            self.corr_nodes.accumulate("u", self.densities(sigma), u)
        u += self.prox_u @ xi
        uc = self.velocity_gauge(sigma, xi)
        u[:self.N] -= uc[0]
        u[self.N:] -= uc[1]
        u += background_velocity(self.nodes, self.gamma)
        return u

    def rigid_motion_fit(self, u):
        """Per-body weighted rigid-motion fit and the worst node residual."""
        v = np.zeros((self.K, 2))
        om = np.zeros(self.K)
        resid = 0.0
        for j, b in enumerate(self.bodies):
            sl = self.body_slice(j)
            ux = u[sl.start:sl.stop]
            uy = u[self.N + sl.start:self.N + sl.stop]
            w = b.weights
            v[j, 0] = (w @ ux) / b.perimeter
            v[j, 1] = (w @ uy) / b.perimeter
            c = b.centroid
            rx = b.x[0] - c[0]
            ry = b.x[1] - c[1]
            r2 = w @ (rx * rx + ry * ry)
            om[j] = (w @ (-ry * ux + rx * uy)) / r2
            dev = np.hypot(ux - v[j, 0] + om[j] * ry,
                           uy - v[j, 1] - om[j] * rx)
            resid = max(resid, float(dev.max()))
        return v, om, resid

    def constraint_residuals(self, sigma):
        """Per-body |net sigma| and |torque moment of sigma| (stacked)."""
        out = np.zeros((self.K, 2))
        for j, b in enumerate(self.bodies):
            sl = self.body_slice(j)
            sx = sigma[sl.start:sl.stop]
            sy = sigma[self.N + sl.start:self.N + sl.stop]
            w = b.weights
            c = b.centroid
            F = np.hypot(w @ sx, w @ sy)
            tq = abs(w @ (-(b.x[1] - c[1]) * sx + (b.x[0] - c[0]) * sy))
            out[j] = (F, tq)
        return out


def gmres_solve(ctx, tol, max_iter):
    """Unrestarted GMRES on the mobility operator; returns (sigma, iters, res)."""
    n = 2 * ctx.N
    b = ctx.rhs
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    iters = [0]

    def cb(pr_norm):
        iters[0] += 1

    A = LinearOperator((n, n), matvec=ctx.apply)
    restart = min(max_iter, n)
    x, info = _scipy_gmres(A, b, rtol=tol, atol=0.0, restart=restart,
                           maxiter=1, callback=cb, callback_type="pr_norm")
    res = np.linalg.norm(ctx.apply(x) - b) / bnorm
    if info != 0 and res > tol * 50:
        raise RuntimeError(
            f"GMRES failed to converge in {restart} iterations "
            f"(relative residual {res:.3e})")
    return x, iters[0], res


def solve_mobility(susp, lat, mu, gamma, tol=1e-10, opts=None):
    """Quasi-static mobility solve: density, rigid velocities, diagnostics."""
    opts = opts or SolverOptions()
    opts.gmres_tol = tol
    if opts.check_overlap and len(susp):
        dmin = min_separation(susp, lat)
        if dmin <= 0.0:
            raise RuntimeError(f"overlapping boundaries (min separation {dmin:.3e})")
    ctx = MobilityContext(susp, lat, mu, gamma, opts)
    if ctx.K == 0:
        return MobilitySolution(
            sigma=np.zeros(0), v=np.zeros((0, 2)), omega=np.zeros(0),
            rigid_residual=0.0, iterations=0, gmres_residual=0.0,
            periodizer_residual=0.0, consistency=np.zeros(3),
            xi=np.zeros(2 * ctx.per.n_proxy), surface_velocity=np.zeros(0),
            ctx=ctx)
    sigma, iters, res = gmres_solve(ctx, tol, opts.max_iter)
    xi, d = ctx.periodize_density(sigma)
    pres = np.linalg.norm(ctx.per.Q @ xi - d) / max(np.linalg.norm(d), 1e-300)
    cons = ctx.per.check_consistency(d)
    u = ctx.surface_velocity(sigma, xi)
    v, om, rigid_res = ctx.rigid_motion_fit(u)
    log.info("mobility solve: %d bodies, %d nodes, %d iters, res %.2e, "
             "rigid %.2e", ctx.K, ctx.N, iters, res, rigid_res)
    return MobilitySolution(sigma=sigma, v=v, omega=om,
                            rigid_residual=rigid_res, iterations=iters,
                            gmres_residual=res, periodizer_residual=pres,
                            consistency=cons, xi=xi, surface_velocity=u,
                            ctx=ctx)


def eval_fields(sol, nx=200, ny=200, pad=0.0):
    """Total velocity and pressure on an (nx, ny) grid over the unit cell.

    Points inside a particle (or one of its near images) are masked and
    assigned the body's rigid velocity; pressure is NaN there. Returns
    (points (2, nx*ny), u (2, nx*ny), p (nx*ny), inside mask).
    """
    ctx = sol.ctx
    lat = ctx.lat
    a = np.linspace(-0.5 - pad, 0.5 + pad, nx)
    b = np.linspace(-0.5 - pad, 0.5 + pad, ny)
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = lat.from_lattice_coords(np.vstack([A.ravel(), B.ravel()]))
    npts = pts.shape[1]

    inside = np.zeros(npts, dtype=bool)
    owner = np.full(npts, -1)
    for j, bd in enumerate(ctx.bodies):
        for s in ctx.image_shifts[j]:
            hit = inside_mask(bd, pts, shift=s)
            inside |= hit
            owner[hit] = j

    res = ctx.near_fields(sol.sigma, pts, ("u", "p"))
    u, p = res["u"], res["p"]
    out_idx = np.nonzero(~inside)[0]
    if out_idx.size and ctx.K:
        corr = build_near_correction(ctx.bodies, ctx.image_shifts,
                                     pts[:, out_idx], ctx.mu, want=("u", "p"),
                                     cutoff_factor=ctx.opts.cutoff_factor,
                                     cutoff_cap=ctx.cutoff_cap,
                                     evaluators=ctx.evaluators,
                                     fine_cache=ctx.fine_cache)
        if not corr.empty:
            dens = ctx.densities(sol.sigma)
            du = np.zeros(2 * out_idx.size)
            dp = np.zeros(out_idx.size)
            corr.accumulate("u", dens, du)
            corr.accumulate("p", dens, dp)
            u[out_idx] += du[:out_idx.size]
            u[npts + out_idx] += du[out_idx.size:]
            p[out_idx] += dp
    cfields = ctx.per.eval_correction(sol.xi, pts, want=("u", "p"))
    u += cfields["u"]
    p += cfields["p"]
    uc = ctx.velocity_gauge(sol.sigma, sol.xi)
    u[:npts] -= uc[0]
    u[npts:] -= uc[1]
    u += background_velocity(pts, ctx.gamma)

    u = u.reshape(2, npts)
    for j, bd in enumerate(ctx.bodies):
        hit = owner == j
        if not hit.any():
            continue
        c = bd.centroid
        u[0, hit] = sol.v[j, 0] - sol.omega[j] * (pts[1, hit] - c[1])
        u[1, hit] = sol.v[j, 1] + sol.omega[j] * (pts[0, hit] - c[0])
    p[inside] = np.nan
    return pts, u, p, inside
