"""Periodization of Stokes kernel sums on a skew lattice.

The periodized sum splits into a near-image direct sum plus a smooth
correction field solved from an "empty box" boundary value problem: find
a Stokes pair (v, q) in the unit cell whose velocity/traction mismatches
across opposite wall pairs cancel the mismatch of the near sum. The
correction is represented by proxy Stokeslets on the expanded-cell walls
and solved in the least-squares sense (method of fundamental solutions).

Wall-pair traction conventions: both walls of a pair are evaluated with
one fixed unit normal, the outward normal of the cell at L (for L/R) and
at D (for D/U). With that convention a net source force F inside the cell
adds the constant traction jumps F/2|e2| (across L/R) and F/2|e1|
(across D/U) to the discrepancy data of the generalized periodic kernel.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import svd

from .kernels import (stokeslet_matrix, pressure_matrix, traction_matrix,
                      near_sum, DEFAULT_BACKEND)


def gauss_legendre_01(m):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass
class Discrepancy:
    """Velocity (g1, g3) and traction (g2, g4) wall mismatches, each (2, m).

    g1 = f(R) - f(L), g3 = f(U) - f(D), sampled at paired collocation nodes.
    """

    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g4: np.ndarray

    def stacked(self):
        """Length-8m vector [g1x g1y g2x g2y g3x g3y g4x g4y]."""
        return np.concatenate([self.g1[0], self.g1[1], self.g2[0], self.g2[1],
                               self.g3[0], self.g3[1], self.g4[0], self.g4[1]])

    @staticmethod
    def from_stacked(d):
        m = d.size // 8
        g = d.reshape(8, m)
        return Discrepancy(g1=g[0:2], g2=g[2:4], g3=g[4:6], g4=g[6:8])


class Periodizer:
    """Wall collocation nodes, proxy points, MFS matrix and factorization."""

    def __init__(self, lat, m=32, n_proxy=128, mu=1.0, truncation=1e-14):
        if m < 8 or n_proxy < 16:
            raise ValueError("need m >= 8 collocation nodes and >= 16 proxies")
        self.lat = lat
        self.m = m
        self.mu = mu
        self.truncation = truncation

        s, w01 = gauss_legendre_01(m)
        self.xL = lat.wall_points("L", s)
        self.xD = lat.wall_points("D", s)
        self.wL = w01 * lat.wall_length("L")
        self.wD = w01 * lat.wall_length("D")
        self.nL = lat.wall_normal("L")
        self.nD = lat.wall_normal("D")

        self.proxy = _proxy_points(lat, n_proxy)
        self.n_proxy = self.proxy.shape[1]

        self.Q = self._assemble_q()
        self.W = self._assemble_w()

        # column-equilibrated truncated SVD, computed once
        norms = np.linalg.norm(self.Q, axis=0)
        norms[norms == 0.0] = 1.0
        self._colscale = 1.0 / norms
        U, sv, Vt = svd(self.Q * self._colscale[None, :], full_matrices=False)
        keep = sv > truncation * sv[0]
        self._U = U[:, keep]
        self._sv = sv[keep]
        self._Vt = Vt[keep]

    # -- assembly ----------------------------------------------------------

    def _wall_pair_eval(self, base, shift, normal):
        """Velocity and traction difference matrices across one wall pair.

        Rows: proxy-field value at (base + shift) minus value at base, both
        with the given fixed normal. Shapes (2m, 2M) each.
        """
        far = base + np.asarray(shift)[:, None]
        nn = np.tile(np.asarray(normal)[:, None], (1, base.shape[1]))
        dv = stokeslet_matrix(far, self.proxy, self.mu) - \
            stokeslet_matrix(base, self.proxy, self.mu)
        dt = traction_matrix(far, nn, self.proxy) - \
            traction_matrix(base, nn, self.proxy)
        return dv, dt

    def _assemble_q(self):
        e1 = np.asarray(self.lat.e1)
        e2 = np.asarray(self.lat.e2)
        q1, q2 = self._wall_pair_eval(self.xL, e1, self.nL)
        q3, q4 = self._wall_pair_eval(self.xD, e2, self.nD)
        return np.vstack([q1, q2, q3, q4])

    def _assemble_w(self):
        """Consistency matrix: W^T d = (net force x, net force y, net flux)."""
        m = self.m
        W = np.zeros((8 * m, 3))
        W[2 * m:3 * m, 0] = self.wL          # g2x on L
        W[6 * m:7 * m, 0] = self.wD          # g4x on D
        W[3 * m:4 * m, 1] = self.wL          # g2y
        W[7 * m:8 * m, 1] = self.wD          # g4y
        W[0:m, 2] = self.nL[0] * self.wL     # n . g1 on L
        W[m:2 * m, 2] = self.nL[1] * self.wL
        W[4 * m:5 * m, 2] = self.nD[0] * self.wD  # n . g3 on D
        W[5 * m:6 * m, 2] = self.nD[1] * self.wD
        return W

    # -- solving and evaluation --------------------------------------------

    def solve(self, d):
        """Least-squares proxy coefficients for discrepancy data d.

        Accepts a Discrepancy or a stacked 8m vector (or a matrix of
        stacked columns). Returns (xi, relative residual). The truncated
        factorization is applied in factored form; assembling an explicit
        pseudoinverse would lose ~s_max/s_min * eps to cancellation.
        """
        if isinstance(d, Discrepancy):
            d = d.stacked()
        xi = self.apply_pinv(d)
        res = np.linalg.norm(self.Q @ xi - d) / max(np.linalg.norm(d), 1e-300)
        return xi, res

    def apply_pinv(self, d):
        """Factored pseudoinverse application to a vector or to columns."""
        y = self._U.T @ d
        y = y / (self._sv[:, None] if d.ndim > 1 else self._sv)
        xi = self._Vt.T @ y
        return xi * (self._colscale[:, None] if d.ndim > 1 else self._colscale)

    def check_consistency(self, d):
        """W^T d with wall quadrature weights (3-vector)."""
        if isinstance(d, Discrepancy):
            d = d.stacked()
        return self.W.T @ d

    def eval_matrices(self, targets, normals=None, want=("u",)):
        """Proxy-field evaluation matrices at targets for requested fields."""
        out = {}
        if "u" in want:
            out["u"] = stokeslet_matrix(targets, self.proxy, self.mu)
        if "p" in want:
            out["p"] = pressure_matrix(targets, self.proxy)
        if "T" in want:
            out["T"] = traction_matrix(targets, normals, self.proxy)
        return out

    def eval_correction(self, xi, targets, normals=None, want=("u",)):
        """Correction fields at targets from proxy coefficients xi."""
        mats = self.eval_matrices(targets, normals, want)
        return {k: m @ xi for k, m in mats.items()}

    def wall_targets(self):
        """Collocation nodes on all four walls, paired (L, R, D, U)."""
        e1 = np.asarray(self.lat.e1)[:, None]
        e2 = np.asarray(self.lat.e2)[:, None]
        return self.xL, self.xL + e1, self.xD, self.xD + e2

    def factorization_backward_error(self):
        Qr = (self._U * self._sv[None, :]) @ self._Vt
        return np.linalg.norm(Qr - self.Q * self._colscale[None, :]) / \
            np.linalg.norm(self.Q * self._colscale[None, :])


def _proxy_points(lat, n_proxy):
    """Uniformly spaced points on the four walls of the expanded cell."""
    per_wall = [n_proxy // 4] * 4
    for k in range(n_proxy - 4 * (n_proxy // 4)):
        per_wall[k] += 1
    c = np.asarray(lat.center)[:, None]
    e1 = np.asarray(lat.e1)[:, None]
    e2 = np.asarray(lat.e2)[:, None]
    pts = []
    for k, (fixed, run) in enumerate(((e1, e2), (-e1, e2), (e2, e1), (-e2, e1))):
        mw = per_wall[k]
        t = -1.0 + (np.arange(mw) + 0.5) * (2.0 / mw)
        pts.append(c + fixed + t[None, :] * run)
    return np.hstack(pts)


def build_periodizer(lat, m=32, n_proxy=128, mu=1.0, truncation=1e-14):
    """Build the MFS periodizer for a lattice (factorization included)."""
    return Periodizer(lat, m=m, n_proxy=n_proxy, mu=mu, truncation=truncation)


def discrepancy_of_sources(per, sources, mu, backend=None):
    """Wall discrepancy g of the near-image sum of the given point sources.

    Evaluates the full near sum on both walls of each pair and subtracts;
    image cancellations make the result smooth even for sources near walls.
    """
    backend = backend or DEFAULT_BACKEND
    xl, xr, xd, xu = per.wall_targets()
    m = per.m
    nL = np.tile(per.nL[:, None], (1, m))
    nD = np.tile(per.nD[:, None], (1, m))
    resL = near_sum(xl, sources, per.lat, mu, want=("u", "T"),
                    target_normals=nL, backend=backend)
    resR = near_sum(xr, sources, per.lat, mu, want=("u", "T"),
                    target_normals=nL, backend=backend)
    resD = near_sum(xd, sources, per.lat, mu, want=("u", "T"),
                    target_normals=nD, backend=backend)
    resU = near_sum(xu, sources, per.lat, mu, want=("u", "T"),
                    target_normals=nD, backend=backend)
    as2 = lambda v: v.reshape(2, m)
    return Discrepancy(g1=as2(resR["u"] - resL["u"]),
                       g2=as2(resR["T"] - resL["T"]),
                       g3=as2(resU["u"] - resD["u"]),
                       g4=as2(resU["T"] - resD["T"]))


def modified_discrepancy(per, g, net_force):
    """g_tilde = g0 - g, with g0 carrying the constant traction jumps."""
    F = np.asarray(net_force, dtype=float)
    g0_2 = F / (2.0 * per.lat.wall_length("L"))
    g0_4 = F / (2.0 * per.lat.wall_length("D"))
    m = per.m
    return Discrepancy(g1=-g.g1,
                       g2=g0_2[:, None] * np.ones((2, m)) - g.g2,
                       g3=-g.g3,
                       g4=g0_4[:, None] * np.ones((2, m)) - g.g4)


@dataclass
class PeriodicSumResult:
    u: np.ndarray = None
    p: np.ndarray = None
    T: np.ndarray = None
    xi: np.ndarray = None
    residual: float = 0.0
    consistency: np.ndarray = None


def periodic_apply(per, sources, targets, want=("u",), target_normals=None,
                   mu=None, backend=None):
    """Periodized kernel sums at targets for the given point sources.

    Four steps: near sums at targets; near sums at wall nodes forming the
    discrepancy; least-squares empty-box solve with the modified data;
    proxy-field correction added at the targets.
    """
    mu = per.mu if mu is None else mu
    backend = backend or DEFAULT_BACKEND
    near = near_sum(targets, sources, per.lat, mu, want=want,
                    target_normals=target_normals, backend=backend)
    if sources.n == 0:
        return PeriodicSumResult(u=near.get("u"), p=near.get("p"),
                                 T=near.get("T"), xi=np.zeros(2 * per.n_proxy),
                                 residual=0.0, consistency=np.zeros(3))
    g = discrepancy_of_sources(per, sources, mu, backend=backend)
    gt = modified_discrepancy(per, g, sources.net_force)
    xi, res = per.solve(gt)
    corr = per.eval_correction(xi, targets, normals=target_normals, want=want)
    out = PeriodicSumResult(xi=xi, residual=res,
                            consistency=per.check_consistency(gt))
    if "u" in want:
        out.u = near["u"] + corr["u"]
    if "p" in want:
        out.p = near["p"] + corr["p"]
    if "T" in want:
        out.T = near["T"] + corr["T"]
    return out
