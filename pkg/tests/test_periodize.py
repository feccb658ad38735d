import numpy as np
import pytest

from shearcell.geometry import Lattice
from shearcell.kernels import (SourceSet, near_sum, pressure_matrix,
                               stokeslet_matrix, traction_matrix)
from shearcell.periodize import (Discrepancy, build_periodizer,
                                 modified_discrepancy, periodic_apply)

SQUARE = Lattice(center=(0.0, 0.0))
SKEW = Lattice(e2=(np.cos(np.pi / 4), np.sin(np.pi / 4)), center=(0.0, 0.0))


def known_solution_data(per, mu, y0, f0):
    """Wall discrepancy of the free-space field of one exterior Stokeslet."""
    xl, xr, xd, xu = per.wall_targets()

    def v(x):
        return stokeslet_matrix(x, y0[:, None], mu) @ f0

    def t(x, nrm):
        nn = np.tile(nrm[:, None], (1, x.shape[1]))
        return traction_matrix(x, nn, y0[:, None]) @ f0

    return np.concatenate([v(xr) - v(xl), t(xr, per.nL) - t(xl, per.nL),
                           v(xu) - v(xd), t(xu, per.nD) - t(xd, per.nD)])


class TestPeriodizer:
    @pytest.mark.parametrize("lat", [SQUARE, SKEW], ids=["square", "skew"])
    def test_consistency_matrix_annihilates_q(self, lat):
        per = build_periodizer(lat, m=24, n_proxy=80, mu=1.0)
        colnorm = np.linalg.norm(per.Q, axis=0)
        assert np.max(np.abs(per.W.T @ per.Q) / colnorm[None, :]) <= 1e-10

    def test_factorization_backward_error(self):
        per = build_periodizer(SKEW, m=24, n_proxy=96, mu=0.7)
        assert per.factorization_backward_error() <= 1e-12

    def test_velocity_rows_are_stokeslet_differences(self):
        # one entry of the first velocity block assembled by hand
        per = build_periodizer(SQUARE, m=8, n_proxy=16, mu=0.9)
        i, jp = 3, 5
        xL = per.xL[:, i]
        e1 = np.asarray(SQUARE.e1)
        from shearcell.kernels import stokeslet
        G1 = stokeslet(xL + e1, per.proxy[:, jp], 0.9)
        G0 = stokeslet(xL, per.proxy[:, jp], 0.9)
        assert per.Q[i, jp] == pytest.approx(G1[0, 0] - G0[0, 0], abs=1e-15)

    def test_degenerate_lattice_rejected(self):
        with pytest.raises(ValueError):
            Lattice(e1=(1, 0), e2=(2, 0))


class TestEmptyBVP:
    def test_zero_data_constant_field(self):
        per = build_periodizer(SQUARE, m=24, n_proxy=96, mu=1.0)
        xi, res = per.solve(np.zeros(8 * per.m))
        grid = np.array(np.meshgrid(np.linspace(-0.4, 0.4, 9),
                                    np.linspace(-0.4, 0.4, 9))).reshape(2, -1)
        v = per.eval_correction(xi, grid, want=("u",))["u"].reshape(2, -1)
        assert np.abs(v - v[:, :1]).max() <= 1e-12

    @pytest.mark.parametrize("lat", [SQUARE, SKEW], ids=["square", "skew"])
    def test_known_solution_exponential_convergence(self, lat):
        mu = 0.7
        y0 = 1.5 * np.array([np.cos(0.1), np.sin(0.1)])
        f0 = np.array([0.3, -0.6])
        gx, gy = np.meshgrid(np.linspace(-0.45, 0.45, 15),
                             np.linspace(-0.45, 0.45, 15))
        pts = lat.E @ np.vstack([gx.ravel(), gy.ravel()])
        vex = stokeslet_matrix(pts, y0[:, None], mu) @ f0
        qex = pressure_matrix(pts, y0[:, None]) @ f0
        errs = []
        for m, M in ((12, 40), (20, 72), (32, 112), (44, 152)):
            per = build_periodizer(lat, m=m, n_proxy=M, mu=mu)
            xi, _ = per.solve(known_solution_data(per, mu, y0, f0))
            out = per.eval_correction(xi, pts, want=("u", "p"))
            dv = (out["u"] - vex).reshape(2, -1)
            dv -= dv[:, :1]
            dq = out["p"] - qex
            dq -= dq[0]
            errs.append(max(np.abs(dv).max() / np.abs(vex).max(),
                            np.abs(dq).max() / np.abs(qex).max()))
        assert errs[-1] <= 1e-9
        # exponential-style decay: large gains between consecutive levels
        assert errs[0] / errs[2] > 1e3

    def test_consistency_zero_data(self):
        per = build_periodizer(SQUARE, m=16, n_proxy=64, mu=1.0)
        assert np.all(per.check_consistency(np.zeros(8 * per.m)) == 0.0)

    def test_consistency_detects_net_force_violation(self):
        per = build_periodizer(SQUARE, m=16, n_proxy=64, mu=1.0)
        g = Discrepancy(g1=np.zeros((2, 16)), g2=np.ones((2, 16)),
                        g3=np.zeros((2, 16)), g4=np.zeros((2, 16)))
        r = per.check_consistency(g)
        assert abs(r[0]) > 0.1 and abs(r[1]) > 0.1

    def test_modified_discrepancy_is_consistent(self, rng):
        per = build_periodizer(SKEW, m=24, n_proxy=96, mu=1.0)
        src = SourceSet(SKEW.E @ rng.uniform(-0.5, 0.5, (2, 6)),
                        rng.standard_normal((2, 6)))
        res = periodic_apply(per, src, np.array([[0.05], [0.01]]), want=("u",))
        assert np.abs(res.consistency).max() <= 1e-10

    def test_nullity_constant_between_truncations(self):
        mu = 0.7
        y0 = 1.5 * np.array([np.cos(0.1), np.sin(0.1)])
        f0 = np.array([0.3, -0.6])
        grid = np.array(np.meshgrid(np.linspace(-0.3, 0.3, 5),
                                    np.linspace(-0.3, 0.3, 5))).reshape(2, -1)
        fields = []
        for trunc in (1e-12, 1e-14):
            per = build_periodizer(SQUARE, m=28, n_proxy=112, mu=mu,
                                   truncation=trunc)
            xi, _ = per.solve(known_solution_data(per, mu, y0, f0))
            fields.append(per.eval_correction(xi, grid, want=("u",))["u"]
                          .reshape(2, -1))
        diff = fields[0] - fields[1]
        diff -= diff[:, :1]
        assert np.abs(diff).max() <= 1e-9


class TestPeriodicApply:
    def test_empty_sources(self):
        per = build_periodizer(SQUARE, m=16, n_proxy=64, mu=1.0)
        res = periodic_apply(per, SourceSet(np.zeros((2, 0)), np.zeros(0)),
                             np.array([[0.1], [0.2]]), want=("u", "p"))
        assert np.all(res.u == 0) and np.all(res.p == 0)

    def test_zero_net_force_fields_periodic(self):
        lat = Lattice(e2=(0.2, 1.0), center=(0.0, 0.0))
        per = build_periodizer(lat, m=32, n_proxy=128, mu=1.0)
        src = SourceSet(np.array([[0.13, -0.2], [-0.21, 0.3]]),
                        np.array([[0.5, -0.5], [0.2, -0.2]]))
        ab = np.array([[-0.45, -0.38, -0.3], [-0.42, -0.25, -0.45]])
        base = lat.from_lattice_coords(ab)
        for sh in (np.asarray(lat.e1), np.asarray(lat.e2)):
            probes = np.hstack([base, base + sh[:, None]])
            res = periodic_apply(per, src, probes, want=("u",))
            u = res.u.reshape(2, 6)
            assert np.abs(u[:, 3:] - u[:, :3]).max() <= 1e-9

    def test_net_force_wall_jumps(self):
        lat = Lattice(e2=(0.2, 1.0), center=(0.0, 0.0))
        per = build_periodizer(lat, m=32, n_proxy=128, mu=1.0)
        src = SourceSet(np.array([[0.13], [-0.21]]), np.array([[0.7], [0.4]]))
        res = periodic_apply(per, src, np.array([[0.0], [0.0]]), want=("u",))
        xl, xr, xd, xu = per.wall_targets()
        m = per.m

        def wall_traction(x, nrm):
            nn = np.tile(nrm[:, None], (1, m))
            T = near_sum(x, src, lat, 1.0, want=("T",), target_normals=nn)["T"]
            return T + per.eval_correction(res.xi, x, normals=nn,
                                           want=("T",))["T"]

        def wall_velocity(x):
            u = near_sum(x, src, lat, 1.0, want=("u",))["u"]
            return u + per.eval_correction(res.xi, x, want=("u",))["u"]

        # velocity periodic across wall pairs even at net force
        assert np.abs(wall_velocity(xr) - wall_velocity(xl)).max() <= 1e-9
        jump = (wall_traction(xr, per.nL) - wall_traction(xl, per.nL))
        expect = src.net_force / (2 * lat.wall_length("L"))
        np.testing.assert_allclose(jump.reshape(2, m),
                                   np.tile(expect[:, None], (1, m)), atol=1e-8)
        jump2 = (wall_traction(xu, per.nD) - wall_traction(xd, per.nD))
        expect2 = src.net_force / (2 * lat.wall_length("D"))
        np.testing.assert_allclose(jump2.reshape(2, m),
                                   np.tile(expect2[:, None], (1, m)), atol=1e-8)

    def test_interior_stokes_pair_of_correction(self):
        lat = SQUARE
        per = build_periodizer(lat, m=32, n_proxy=128, mu=1.0)
        src = SourceSet(np.array([[0.3], [0.1]]), np.array([[0.4], [-0.2]]))
        res = periodic_apply(per, src, np.array([[0.0], [0.0]]), want=("u",))
        xi = res.xi
        x0 = np.array([0.11, -0.17])
        h = 1e-4

        def fld(p):
            out = per.eval_correction(xi, p.reshape(2, 1), want=("u", "p"))
            return out["u"], out["p"][0]

        ex, ey = np.array([h, 0]), np.array([0, h])
        u0, p0 = fld(x0)
        uxp, pxp = fld(x0 + ex); uxm, pxm = fld(x0 - ex)
        uyp, pyp = fld(x0 + ey); uym, pym = fld(x0 - ey)
        lap = (uxp + uxm + uyp + uym - 4 * u0) / h**2
        gradp = np.array([(pxp - pxm) / (2 * h), (pyp - pym) / (2 * h)])
        assert np.abs(-1.0 * lap + gradp).max() <= 1e-6

    def test_residual_reported_small(self, rng):
        per = build_periodizer(SQUARE, m=32, n_proxy=128, mu=1.0)
        src = SourceSet(rng.uniform(-0.45, 0.45, (2, 8)),
                        rng.standard_normal((2, 8)))
        res = periodic_apply(per, src, np.array([[0.0], [0.0]]))
        assert res.residual <= 1e-11
