import numpy as np
import pytest
from scipy.integrate import quad

from shearcell.closeeval import (LaplaceCloseEvaluator, build_near_correction,
                                 inside_mask, laplace_close,
                                 laplace_slp_self_matrix, naive_matrices,
                                 nystrom_diag_limit, onsurface_velocity,
                                 stokes_close_matrices, stokes_pressure_close,
                                 stokes_slp_close, stokes_slp_self_matrix,
                                 stokes_traction_close,
                                 stokes_traction_self_matrix)
from shearcell.geometry import (EllipseShape, ParticleState, StarShape,
                                discretize)
from shearcell.kernels import (pressure_matrix, stokeslet_matrix,
                               traction_kernel, traction_matrix)


def adaptive_slp(shape, state, dens_fun, target, mu=None, kind="laplace",
                 normal=None, singular_at=None):
    """Adaptively refined quadrature oracle for layer potentials."""
    brk = [0.0, 2 * np.pi]
    if singular_at is not None:
        t0 = singular_at % (2 * np.pi)
        brk = sorted({0.0, 2 * np.pi,
                      *(np.clip(t0 + d, 0, 2 * np.pi)
                        for d in (-0.5, -0.02, -0.0005, 0, 0.0005, 0.02, 0.5))})

    def comp(i):
        def integ(t):
            x, dx, _ = shape.boundary(np.array([t]), state.center, state.angle)
            sp = np.hypot(*dx[:, 0])
            r = target - x[:, 0]
            r2 = r @ r
            s = dens_fun(np.array([t]))
            if kind == "laplace":
                return np.log(1 / np.sqrt(r2)) * s[0, 0] * sp / (2 * np.pi)
            s = s[:, 0]
            if kind == "u":
                G = (np.eye(2) * (-0.5 * np.log(r2))
                     + np.outer(r, r) / r2) / (4 * np.pi * mu)
                return (G @ s)[i] * sp
            if kind == "p":
                return (r @ s) / (2 * np.pi * r2) * sp
            rn = r @ normal
            Gt = -(1 / np.pi) * np.outer(r, r) * rn / (r2 * r2)
            return (Gt @ s)[i] * sp

        tot = 0.0
        for a, b in zip(brk[:-1], brk[1:]):
            if b <= a:
                continue
            v, _ = quad(integ, a, b, limit=800, epsabs=1e-14, epsrel=1e-14)
            tot += v
        return tot

    if kind in ("laplace", "p"):
        return comp(0)
    return np.array([comp(0), comp(1)])


class TestKressSelf:
    def test_circle_constant_density(self):
        a = 0.37
        bd = discretize(EllipseShape(a, a), ParticleState([0.2, -0.1]), 64)
        val = laplace_slp_self_matrix(bd) @ np.ones(bd.n)
        np.testing.assert_allclose(val, a * np.log(1 / a), atol=1e-14)

    def test_star_vs_adaptive(self):
        sh = StarShape(0.3, 0.35, 3, 0.4)
        st = ParticleState([0.1, 0.2], 0.3)
        bd = discretize(sh, st, 96)
        dens = lambda t: (0.3 + np.cos(t) + 0.2 * np.sin(2 * t + 0.4))[None, :]
        got = (laplace_slp_self_matrix(bd) @ dens(bd.theta)[0])[5]
        ref = adaptive_slp(sh, st, dens, bd.x[:, 5], kind="laplace",
                           singular_at=bd.theta[5])
        assert abs(got - ref) < 5e-10


class TestLaplaceClose:
    def test_circle_identity_value_grad_hess(self):
        a = 0.37
        c = np.array([0.2, -0.1])
        bd = discretize(EllipseShape(a, a), ParticleState(c), 64)
        rho = np.array([a * 1.000001, a * 1.01, a * 1.5, 4 * a])
        ang = np.array([0.3, 1.0, 2.0, 5.0])
        tg = c[:, None] + rho * np.vstack([np.cos(ang), np.sin(ang)])
        v, g, h = laplace_close(bd, np.ones(bd.n), tg)
        np.testing.assert_allclose(v, a * np.log(1 / rho), atol=1e-13)
        gref = -a / rho * np.vstack([np.cos(ang), np.sin(ang)])
        np.testing.assert_allclose(g, gref, atol=1e-12)
        xx, yy = tg[0] - c[0], tg[1] - c[1]
        r2 = xx**2 + yy**2
        np.testing.assert_allclose(h[0, 0], -a * (1 / r2 - 2 * xx * xx / r2**2),
                                   atol=1e-11)
        np.testing.assert_allclose(h[0, 1], 2 * a * xx * yy / r2**2, atol=1e-11)

    def test_far_matches_naive(self):
        bd = discretize(StarShape(0.2, 0.3, 4, 0.9),
                        ParticleState([0.0, 0.0], 0.5), 128)
        dens = 0.4 + np.cos(bd.theta)
        tg = np.array([[0.9, -1.0], [0.6, -0.8]])
        v, _, _ = laplace_close(bd, dens, tg)
        dxx = tg[0][:, None] - bd.x[0]
        dyy = tg[1][:, None] - bd.x[1]
        naive = ((-0.5 / (2 * np.pi)) * np.log(dxx**2 + dyy**2)
                 * bd.weights[None, :]) @ dens
        np.testing.assert_allclose(v, naive, atol=1e-12)

    def test_very_close_target(self):
        sh = EllipseShape(0.25, 0.125)
        st = ParticleState([0.0, 0.0])
        bd = discretize(sh, st, 128)
        d = bd.h**2 / 10
        th0 = 0.7
        x, dx, _ = sh.boundary(np.array([th0]), st.center, st.angle)
        nrm = np.array([dx[1, 0], -dx[0, 0]]) / np.hypot(*dx[:, 0])
        tgt = x[:, 0] + d * nrm
        dens_fun = lambda t: (0.4 + np.cos(t) + 0.1 * np.sin(3 * t))[None, :]
        v, _, _ = laplace_close(bd, dens_fun(bd.theta)[0], tgt[:, None])
        ref = adaptive_slp(sh, st, dens_fun, tgt, kind="laplace",
                           singular_at=th0)
        assert abs(v[0] - ref) < 1e-10


class TestStokesCompositions:
    @pytest.mark.parametrize("shape,n", [(EllipseShape(0.25, 0.125), 128),
                                         (StarShape(0.2, 0.45, 5, 1.1), 384)])
    def test_far_field_equivalence(self, shape, n, rng):
        bd = discretize(shape, ParticleState([0.0, 0.0], 0.2), n)
        sig = rng.standard_normal(2 * bd.n)
        tg = np.array([[0.9, -1.2, 0.1], [0.8, 0.3, -1.4]])
        nrm = rng.standard_normal((2, 3))
        nrm /= np.hypot(*nrm)
        mu = 0.7
        np.testing.assert_allclose(
            stokes_slp_close(bd, sig, tg, mu=mu),
            stokeslet_matrix(tg, bd.x, mu, weights=bd.weights) @ sig, atol=1e-10)
        np.testing.assert_allclose(
            stokes_pressure_close(bd, sig, tg),
            pressure_matrix(tg, bd.x, weights=bd.weights) @ sig, atol=1e-10)
        np.testing.assert_allclose(
            stokes_traction_close(bd, sig, tg, nrm),
            traction_matrix(tg, nrm, bd.x, weights=bd.weights) @ sig, atol=5e-9)

    def test_zero_density(self):
        bd = discretize(EllipseShape(0.2, 0.1), ParticleState([0, 0]), 64)
        tg = np.array([[0.5], [0.4]])
        assert np.all(stokes_slp_close(bd, np.zeros(2 * bd.n), tg, mu=1.0) == 0)
        assert np.all(stokes_pressure_close(bd, np.zeros(2 * bd.n), tg) == 0)

    def test_close_velocity_pressure_traction_vs_adaptive(self):
        sh = EllipseShape(0.25, 0.125)
        st = ParticleState([0.0, 0.0])
        bd = discretize(sh, st, 128)
        mu = 1.3
        d = bd.h**2 / 10
        th0 = 0.7
        x, dx, _ = sh.boundary(np.array([th0]), st.center, st.angle)
        nrm = np.array([dx[1, 0], -dx[0, 0]]) / np.hypot(*dx[:, 0])
        tgt = (x[:, 0] + d * nrm)[:, None]
        dfun = lambda t: np.vstack([0.4 + np.cos(t) + 0.1 * np.sin(3 * t),
                                    -0.2 + np.sin(t)])
        sig = np.concatenate(list(dfun(bd.theta)))
        u = stokes_slp_close(bd, sig, tgt, mu=mu)
        uref = adaptive_slp(sh, st, dfun, tgt[:, 0], mu=mu, kind="u",
                            singular_at=th0)
        np.testing.assert_allclose(u, uref, atol=1e-10)
        p = stokes_pressure_close(bd, sig, tgt)
        pref = adaptive_slp(sh, st, dfun, tgt[:, 0], kind="p", singular_at=th0)
        np.testing.assert_allclose(p, pref, atol=1e-10)
        T = stokes_traction_close(bd, sig, tgt, nrm[:, None])
        Tref = adaptive_slp(sh, st, dfun, tgt[:, 0], kind="T", normal=nrm,
                            singular_at=th0)
        np.testing.assert_allclose(T, Tref, atol=1e-10)

    def test_gauss_law_far_circle(self):
        # net exterior traction over an enclosing far circle = -net density
        bd = discretize(StarShape(0.2, 0.3, 3, 0.4), ParticleState([0, 0], 0.1),
                        96)
        tt = bd.theta
        sig = np.concatenate([0.3 + np.cos(tt), -0.2 + np.sin(2 * tt)])
        nq = 256
        phi = 2 * np.pi * np.arange(nq) / nq
        R = 0.8
        circle = R * np.vstack([np.cos(phi), np.sin(phi)])
        nrm = circle / R
        T = stokes_traction_close(bd, sig, circle, nrm)
        w = 2 * np.pi * R / nq
        net = w * np.array([T[:nq].sum(), T[nq:].sum()])
        sig_net = np.array([(bd.weights * sig[:bd.n]).sum(),
                            (bd.weights * sig[bd.n:]).sum()])
        np.testing.assert_allclose(net, -sig_net, atol=1e-10)

    def test_flux_identity_far_contour(self):
        bd = discretize(EllipseShape(0.22, 0.13), ParticleState([0, 0], 0.7), 96)
        tt = bd.theta
        sig = np.concatenate([0.3 + np.cos(tt), -0.2 + np.sin(2 * tt)])
        nq = 256
        phi = 2 * np.pi * np.arange(nq) / nq
        R = 0.9
        circle = R * np.vstack([np.cos(phi), np.sin(phi)])
        nrm = circle / R
        u = stokes_slp_close(bd, sig, circle, mu=0.8)
        w = 2 * np.pi * R / nq
        flux = w * (u[:nq] * nrm[0] + u[nq:] * nrm[1]).sum()
        assert abs(flux) < 1e-10


class TestNystromDiag:
    def test_circle(self):
        r = 0.31
        bd = discretize(EllipseShape(r, r), ParticleState([0, 0]), 48)
        diag = nystrom_diag_limit(bd)
        t = bd.tangent
        for k in (0, 7, 23):
            expect = -(1 / (2 * np.pi * r)) * np.outer(t[:, k], t[:, k])
            np.testing.assert_allclose(diag[k], expect, atol=1e-13)

    def test_straight_line_limit(self):
        # huge circle locally approximates a straight line: kappa -> 0
        R = 1e6
        bd = discretize(EllipseShape(R, R), ParticleState([0, 0]), 48)
        assert np.abs(nystrom_diag_limit(bd)).max() <= 1.0 / (2 * np.pi * R) + 1e-16

    def test_ellipse_matches_richardson(self):
        sh = EllipseShape(0.25, 0.125)
        st = ParticleState([0.0, 0.0])
        bd = discretize(sh, st, 64)
        i = 7
        x0 = bd.x[:, i]
        n0 = bd.normal[:, i]
        vals = []
        steps = (4e-4, 2e-4, 1e-4)
        for s in steps:
            y = sh.boundary(np.array([bd.theta[i] + s]), st.center,
                            st.angle)[0][:, 0]
            vals.append(traction_kernel(x0, y, n0))
        # second-order Richardson on the halving sequence
        r1 = 2 * vals[1] - vals[0]
        r2 = 2 * vals[2] - vals[1]
        ext = (4 * r2 - r1) / 3
        np.testing.assert_allclose(nystrom_diag_limit(bd)[i], ext, atol=1e-8)


class TestOnSurface:
    def test_zero_density(self):
        bd = discretize(EllipseShape(0.2, 0.1), ParticleState([0, 0]), 64)
        assert np.all(onsurface_velocity(bd, np.zeros(2 * bd.n)) == 0)

    @pytest.mark.parametrize("shape,n", [(EllipseShape(0.25, 0.125), 128),
                                         (StarShape(0.25, 0.5, 3, 0.7), 256)])
    def test_exterior_limit_continuity(self, shape, n):
        bd = discretize(shape, ParticleState([0.1, -0.2], 0.4), n)
        tt = bd.theta
        sig = np.concatenate([0.4 + np.cos(tt) + 0.1 * np.sin(3 * tt),
                              -0.2 + np.sin(tt)])
        mu = 0.9
        u_self = onsurface_velocity(bd, sig, mu)
        tg = bd.x + 1e-8 * bd.normal
        u_close = stokes_slp_close(bd, sig, tg, mu=mu)
        assert np.abs(u_self - u_close).max() <= 1e-9 * np.linalg.norm(sig)

    def test_traction_gauss_law_on_surface(self):
        # PV traction matrix satisfies sum_w T_pv = -sum_w sigma / 2
        bd = discretize(StarShape(0.23, 0.3, 4, 0.2), ParticleState([0, 0]), 160)
        tt = bd.theta
        sig = np.concatenate([0.4 + np.cos(tt), -0.2 + np.sin(2 * tt)])
        T = stokes_traction_self_matrix(bd) @ sig
        w2 = np.concatenate([bd.weights, bd.weights])
        net_pv = np.array([(T * w2)[:bd.n].sum(), (T * w2)[bd.n:].sum()])
        net_sig = np.array([(sig * w2)[:bd.n].sum(), (sig * w2)[bd.n:].sum()])
        np.testing.assert_allclose(net_pv, -0.5 * net_sig, atol=1e-12)


class TestNearCorrection:
    def _pair(self, d, n):
        gap = d + 0.375
        b1 = discretize(EllipseShape(0.25, 0.125), ParticleState([-gap / 2, 0]), n)
        b2 = discretize(EllipseShape(0.125, 0.25), ParticleState([gap / 2, 0]), n)
        return b1, b2

    def test_well_separated_empty(self):
        b1, b2 = self._pair(0.5, 64)
        op = build_near_correction([b1], [[np.zeros(2)]], b2.x, 1.0,
                                   target_normals=b2.normal, want=("T",))
        assert op.empty

    def test_corrected_matvec_matches_dense_close(self, rng):
        b1, b2 = self._pair(1e-3, 128)
        sig = rng.standard_normal(2 * b1.n)
        op = build_near_correction([b1], [[np.zeros(2)]], b2.x, 1.0,
                                   target_normals=b2.normal, want=("u", "T"),
                                   upsample=1)
        assert not op.empty
        u = naive_matrices(b1, b2.x, mu=1.0, want=("u",))["u"] @ sig
        op.accumulate("u", [sig], u)
        dense = stokes_close_matrices(b1, b2.x, mu=1.0, want=("u",))["u"] @ sig
        flagged = op.blocks[0][1].target_idx
        nn = b2.n
        got = np.concatenate([u[flagged], u[flagged + nn]])
        want = np.concatenate([dense[flagged], dense[flagged + nn]])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_upsampled_agrees_on_resolved_density(self):
        b1, b2 = self._pair(1e-3, 128)
        tt = b1.theta
        sig = np.concatenate([0.3 + np.cos(tt) + 0.2 * np.sin(2 * tt),
                              -0.1 + np.sin(tt)])
        out = {}
        for up in (1, 2):
            op = build_near_correction([b1], [[np.zeros(2)]], b2.x, 1.0,
                                       target_normals=b2.normal,
                                       want=("u", "T"), upsample=up)
            T = naive_matrices(b1, b2.x, mu=1.0, target_normals=b2.normal,
                               want=("T",))["T"] @ sig
            op.accumulate("T", [sig], T)
            out[up] = T
        np.testing.assert_allclose(out[1], out[2], atol=1e-10)

    def test_linearity(self, rng):
        b1, b2 = self._pair(1e-2, 96)
        op = build_near_correction([b1], [[np.zeros(2)]], b2.x, 1.0,
                                   target_normals=b2.normal, want=("T",))
        sig = rng.standard_normal(2 * b1.n)
        out1 = np.zeros(2 * b2.n)
        op.accumulate("T", [3.7 * sig], out1)
        out2 = np.zeros(2 * b2.n)
        op.accumulate("T", [sig], out2)
        np.testing.assert_allclose(out1, 3.7 * out2, atol=1e-12)


class TestInsideMask:
    def test_basic(self):
        bd = discretize(StarShape(0.25, 0.4, 4, 0.3), ParticleState([0.2, 0.1]),
                        96)
        pts = np.array([[0.2, 0.2 + 0.6, 0.2], [0.1, 0.1, 0.1 + 0.4]])
        np.testing.assert_array_equal(inside_mask(bd, pts),
                                      [True, False, False])

    def test_near_boundary_classification(self):
        sh = EllipseShape(0.25, 0.125)
        st = ParticleState([0.0, 0.0])
        bd = discretize(sh, st, 64)
        th = np.array([0.3])
        x, dx, _ = sh.boundary(th, st.center, st.angle)
        nrm = np.array([dx[1, 0], -dx[0, 0]]) / np.hypot(*dx[:, 0])
        eps = 1e-4
        pts = np.hstack([(x[:, 0] + eps * nrm)[:, None],
                         (x[:, 0] - eps * nrm)[:, None]])
        np.testing.assert_array_equal(inside_mask(bd, pts), [False, True])
