"""Free-space 2D Stokes kernels and near-image direct summation.

Kernels (r = x - y, target x, source y):

    velocity  G_ij  = (1/4 pi mu) (delta_ij log(1/r) + r_i r_j / r^2)
    pressure  Gp_j  = (1/2 pi) r_j / r^2
    traction  Gt_ik = -(1/pi) (r_i r_k / r^2) (r . n_x / r^2)

Vector fields are stacked component-major: [f_x (n), f_y (n)].
"""

import numpy as np
import numba


def stokeslet(x, y, mu):
    """2x2 Stokeslet tensor for a single target/source pair."""
    r = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r2 = r @ r
    if r2 == 0.0:
        raise ValueError("coincident target and source")
    return (np.eye(2) * (-0.5 * np.log(r2)) + np.outer(r, r) / r2) / (4 * np.pi * mu)


def pressure_kernel(x, y):
    """Single-layer pressure kernel (2-vector)."""
    r = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r2 = r @ r
    if r2 == 0.0:
        raise ValueError("coincident target and source")
    return r / (2 * np.pi * r2)


def traction_kernel(x, y, n_x):
    """Single-layer traction tensor at a target with unit normal n_x."""
    r = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r2 = r @ r
    if r2 == 0.0:
        raise ValueError("coincident target and source")
    rn = r @ np.asarray(n_x, dtype=float)
    return -(1 / np.pi) * np.outer(r, r) * rn / (r2 * r2)


# ---------------------------------------------------------------------------
# dense matrix builders (used for Nystrom assembly and test oracles)
# ---------------------------------------------------------------------------

def stokeslet_matrix(tx, sx, mu, weights=None):
    """(2T, 2S) velocity matrix; weights multiply source columns if given."""
    dx = tx[0][:, None] - sx[0]
    dy = tx[1][:, None] - sx[1]
    r2 = dx * dx + dy * dy
    logr = 0.5 * np.log(r2)
    ir2 = 1.0 / r2
    c = 1.0 / (4 * np.pi * mu)
    T, S = tx.shape[1], sx.shape[1]
    A = np.empty((2 * T, 2 * S))
    A[:T, :S] = c * (-logr + dx * dx * ir2)
    A[:T, S:] = c * (dx * dy * ir2)
    A[T:, :S] = A[:T, S:]
    A[T:, S:] = c * (-logr + dy * dy * ir2)
    if weights is not None:
        w2 = np.concatenate([weights, weights])
        A *= w2[None, :]
    return A

def pressure_matrix(tx, sx, weights=None):
    """(T, 2S) pressure matrix."""
    dx = tx[0][:, None] - sx[0]
    dy = tx[1][:, None] - sx[1]
    ir2 = 1.0 / (dx * dx + dy * dy)
    c = 1.0 / (2 * np.pi)
    P = np.hstack([c * dx * ir2, c * dy * ir2])
    if weights is not None:
        P *= np.concatenate([weights, weights])[None, :]
    return P

def traction_matrix(tx, tnx, sx, weights=None):
    """(2T, 2S) traction matrix for targets with unit normals tnx."""
    dx = tx[0][:, None] - sx[0]
    dy = tx[1][:, None] - sx[1]
    r2 = dx * dx + dy * dy
    rn = dx * tnx[0][:, None] + dy * tnx[1][:, None]
    f = -(1 / np.pi) * rn / (r2 * r2)
    T, S = tx.shape[1], sx.shape[1]
    A = np.empty((2 * T, 2 * S))
    A[:T, :S] = f * dx * dx
    A[:T, S:] = f * dx * dy
    A[T:, :S] = A[:T, S:]
    A[T:, S:] = f * dy * dy
    if weights is not None:
        A *= np.concatenate([weights, weights])[None, :]
    return A


# ---------------------------------------------------------------------------
# near images
# ---------------------------------------------------------------------------

def near_image_shifts(points, lat, tol=1e-12):
    """Per-point integer lattice shifts (m, n) whose image lies in the
    expanded cell (lattice coordinates within [-1, 1], inclusive ties)."""
    ab = lat.lattice_coords(points)
    out = []
    for k in range(ab.shape[1]):
        a, b = ab[0, k], ab[1, k]
        ms = [m for m in range(-2, 3) if abs(a + m) <= 1.0 + tol]
        ns = [n for n in range(-2, 3) if abs(b + n) <= 1.0 + tol]
        out.append([(m, n) for m in ms for n in ns])
    return out


def near_images(y, lat):
    """All images of point y inside the expanded cell (spec op)."""
    y = np.asarray(y, dtype=float)
    shifts = near_image_shifts(y[:, None], lat)[0]
    e1 = np.asarray(lat.e1)
    e2 = np.asarray(lat.e2)
    return np.array([y + m * e1 + n * e2 for m, n in shifts])


def image_anchors(points, lat):
    """Anchors (m0, n0) of each point's half-open 2x2 near-image block.

    The block {m0, m0+1} x {n0, n0+1} places the point's images at lattice
    coordinates in [-1, 1) on each axis; exactly four images per point.
    Used by the periodized solver so that each boundary node carries one
    whole 2x2 block (ties at the quadrant axes would otherwise produce 6
    or 9 images and break the contour-deformation pairing).
    """
    ab = lat.lattice_coords(points)
    m0 = (-1 - np.floor(ab[0])).astype(int)
    n0 = (-1 - np.floor(ab[1])).astype(int)
    return m0, n0, ab


class SourceSet:
    """Point sources y_j with 2-vector strengths f_j (already weighted)."""

    def __init__(self, points, strengths):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[0] != 2:
            raise ValueError("points must be (2, n)")
        f = np.asarray(strengths, dtype=float)
        if f.shape == self.points.shape:
            f = np.concatenate([f[0], f[1]])
        self.strengths = f  # stacked [fx, fy]

    @property
    def n(self):
        return self.points.shape[1]

    @property
    def net_force(self):
        n = self.n
        return np.array([self.strengths[:n].sum(), self.strengths[n:].sum()])


def expand_near_sources(sources, lat):
    """Replicate each source at all of its near images.

    Returns (points (2, M), strengths (2M,), index-of-parent (M,)).
    """
    shifts = near_image_shifts(sources.points, lat)
    e1 = np.asarray(lat.e1)
    e2 = np.asarray(lat.e2)
    n = sources.n
    fx, fy = sources.strengths[:n], sources.strengths[n:]
    pts, sfx, sfy, parent = [], [], [], []
    for k, shl in enumerate(shifts):
        for m, nn in shl:
            pts.append(sources.points[:, k] + m * e1 + nn * e2)
            sfx.append(fx[k])
            sfy.append(fy[k])
            parent.append(k)
    pts = np.array(pts).T
    return pts, np.concatenate([sfx, sfy]), np.asarray(parent)


# ---------------------------------------------------------------------------
# direct summation backend (numba)
# ---------------------------------------------------------------------------

@numba.njit(parallel=True, fastmath=True, cache=True)
def _direct_sum(tx, ty, tnx, tny, sx, sy, fx, fy, inv4pimu,
                want_u, want_p, want_t, ux, uy, p, Tx, Ty):
    nt = tx.shape[0]
    ns = sx.shape[0]
    for i in numba.prange(nt):
        aux = 0.0
        auy = 0.0
        ap = 0.0
        atx = 0.0
        aty = 0.0
        for j in range(ns):
            dx = tx[i] - sx[j]
            dy = ty[i] - sy[j]
            r2 = dx * dx + dy * dy
            if r2 == 0.0:
                continue  # a target sitting exactly on a source: self terms
                # are supplied by the on-surface quadrature rules
            ir2 = 1.0 / r2
            if want_u:
                logr = 0.5 * np.log(r2)
                gxx = -logr + dx * dx * ir2
                gxy = dx * dy * ir2
                gyy = -logr + dy * dy * ir2
                aux += gxx * fx[j] + gxy * fy[j]
                auy += gxy * fx[j] + gyy * fy[j]
            if want_p:
                ap += (dx * fx[j] + dy * fy[j]) * ir2
            if want_t:
                rn = dx * tnx[i] + dy * tny[i]
                f = rn * ir2 * ir2
                atx += f * (dx * dx * fx[j] + dx * dy * fy[j])
                aty += f * (dx * dy * fx[j] + dy * dy * fy[j])
        if want_u:
            ux[i] = aux * inv4pimu
            uy[i] = auy * inv4pimu
        if want_p:
            p[i] = ap / (2.0 * np.pi)
        if want_t:
            Tx[i] = -atx / np.pi
            Ty[i] = -aty / np.pi


class DirectSummation:
    """O(N^2) kernel summation; the required backend.

    Fast-summation replacements must honor the same contract and report
    their tolerance via `epsilon` (exact here).
    """

    epsilon = 0.0

    def sum(self, targets, points, strengths, mu,
            want=("u",), target_normals=None):
        nt = targets.shape[1]
        ns = points.shape[1]
        want_u = "u" in want
        want_p = "p" in want
        want_t = "T" in want
        if want_t and target_normals is None:
            raise ValueError("traction requested without target normals")
        ux = np.zeros(nt); uy = np.zeros(nt); p = np.zeros(nt)
        Tx = np.zeros(nt); Ty = np.zeros(nt)
        if ns:
            tn = target_normals if target_normals is not None else np.zeros((2, nt))
            _direct_sum(
                np.ascontiguousarray(targets[0]), np.ascontiguousarray(targets[1]),
                np.ascontiguousarray(tn[0]), np.ascontiguousarray(tn[1]),
                np.ascontiguousarray(points[0]), np.ascontiguousarray(points[1]),
                np.ascontiguousarray(strengths[:ns]), np.ascontiguousarray(strengths[ns:]),
                1.0 / (4 * np.pi * mu), want_u, want_p, want_t,
                ux, uy, p, Tx, Ty)
        out = {}
        if want_u:
            out["u"] = np.concatenate([ux, uy])
        if want_p:
            out["p"] = p
        if want_t:
            out["T"] = np.concatenate([Tx, Ty])
        return out


DEFAULT_BACKEND = DirectSummation()


def near_sum(targets, sources, lat, mu, want=("u",), target_normals=None,
             backend=None):
    """Direct summation of free-space kernels over all near images of the
    sources, per the expanded-cell membership rule."""
    backend = backend or DEFAULT_BACKEND
    nt = targets.shape[1]
    if sources.n == 0:
        out = {}
        if "u" in want:
            out["u"] = np.zeros(2 * nt)
        if "p" in want:
            out["p"] = np.zeros(nt)
        if "T" in want:
            out["T"] = np.zeros(2 * nt)
        return out
    pts, strengths, _ = expand_near_sources(sources, lat)
    return backend.sum(targets, pts, strengths, mu, want=want,
                       target_normals=target_normals)
