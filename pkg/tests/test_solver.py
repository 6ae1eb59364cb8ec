import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcqft.geometry import Bump, Grid, Metric, OutOfDomainError, Spacetime, causal_hull, tensor_bump
from lcqft.solver import (
    CauchyData, TestFunction, apply_kg, e_adv, e_causal, e_ret, momentum, propagate,
    restrict_to_data, solve_cauchy, symplectic_surface, symplectic_volume,
)


def curved(n_x=128, n_t=256):
    g = Grid.slab(n_x, n_t, 5.0)
    h = tensor_bump(g, Bump(2.5, 3.0, 1.6, 2.0), (0.15, 0.1, 0.1))
    return Spacetime(g, h.apply(Metric.flat(g)))


FLAT = Spacetime.flat(Grid.slab(128, 256, 5.0))
CURVED = curved()
F1 = Bump(1.8, 2.0, 0.5, 0.6)
F2 = Bump(3.1, 4.0, 0.6, 0.5)


def tf(st_, b):
    return TestFunction.from_function(st_.grid, b)


class TestOperator:
    def test_constant(self):
        st_ = Spacetime.flat(Grid.slab(32, 64, 5.0), m=1.7)
        out = apply_kg(st_, np.full(st_.grid.shape, 2.0))
        assert np.allclose(out[1:-1], 1.7 ** 2 * 2.0, rtol=0, atol=1e-13)
        assert np.all(np.isnan(out[[0, -1]]))

    def test_divergence_form_by_hand(self):
        """Independent loop evaluation of the discrete divergence form at random nodes."""
        st_ = CURVED
        g = st_.grid
        met = st_.metric
        gi = met.inverse
        sq = met.sqrt_neg_det
        A = [sq * gi[0], sq * gi[1], sq * gi[2]]
        rng = np.random.default_rng(3)
        phi = rng.normal(size=g.shape)
        out = apply_kg(st_, phi)
        n = g.n_x
        dt, dx = g.dt, g.dx
        for _ in range(10):
            j = int(rng.integers(1, g.n_t))
            i = int(rng.integers(0, n))
            ip, im = (i + 1) % n, (i - 1) % n
            tt = (0.5 * (A[0][j, i] + A[0][j + 1, i]) * (phi[j + 1, i] - phi[j, i])
                  - 0.5 * (A[0][j, i] + A[0][j - 1, i]) * (phi[j, i] - phi[j - 1, i])) / dt ** 2
            xx = (0.5 * (A[2][j, i] + A[2][j, ip]) * (phi[j, ip] - phi[j, i])
                  - 0.5 * (A[2][j, i] + A[2][j, im]) * (phi[j, i] - phi[j, im])) / dx ** 2
            dxp = lambda jj: (phi[jj, ip] - phi[jj, im]) / (2 * dx)
            tx = (A[1][j + 1, i] * dxp(j + 1) - A[1][j - 1, i] * dxp(j - 1)) / (2 * dt)
            dtp = lambda ii: A[1][j, ii] * (phi[j + 1, ii] - phi[j - 1, ii]) / (2 * dt)
            xt = (dtp(ip) - dtp(im)) / (2 * dx)
            expected = (tt + xx + tx + xt) / sq[j, i] + st_.m ** 2 * phi[j, i]
            assert out[j, i] == pytest.approx(expected, rel=1e-12, abs=1e-9)


class TestCauchy:
    @pytest.mark.parametrize("n", [64, 128, 256])
    def test_plane_wave(self, n):
        st_ = Spacetime.flat(Grid.slab(n, 2 * n, 5.0))
        k = 3.0
        w = np.sqrt(k ** 2 + 1.0)
        x = st_.grid.x
        data = CauchyData(np.cos(-k * x), -w * np.sin(-k * x), 0.0)
        sol = solve_cauchy(st_, data)
        T, X = st_.grid.mesh()
        err = np.max(np.abs(sol.values - np.cos(w * T - k * X)))
        # second order: the error scales like (dx)^2 times a phase constant
        assert err < 40 * st_.grid.dx ** 2

    def test_zero_data(self):
        sol = solve_cauchy(CURVED, CauchyData.zeros(128, 2.5))
        assert np.all(sol.values == 0)

    def test_round_trip_exact(self):
        rng = np.random.default_rng(0)
        data = CauchyData(rng.normal(size=128), rng.normal(size=128), CURVED.grid.t[100])
        back = restrict_to_data(solve_cauchy(CURVED, data), CURVED, data.slice_time)
        assert np.max(np.abs(back.phi - data.phi)) == 0
        assert np.max(np.abs(back.pi - data.pi)) <= 1e-11

    def test_propagate_and_back(self):
        data = restrict_to_data(e_causal(CURVED, tf(CURVED, F1)), CURVED, CURVED.grid.t[40])
        there = propagate(CURVED, data, CURVED.grid.t[200])
        back = propagate(CURVED, there, data.slice_time)
        assert (back - data).norm() <= 1e-9 * data.norm()

    def test_residual_small(self):
        sol = solve_cauchy(FLAT, CauchyData(np.sin(FLAT.grid.x), np.zeros(128), 2.5))
        assert sol.residual() <= 1e-10

    def test_off_grid_slice(self):
        with pytest.raises(OutOfDomainError):
            solve_cauchy(FLAT, CauchyData.zeros(128, 2.501))


class TestPropagators:
    @pytest.mark.parametrize("st_", [FLAT, CURVED], ids=["flat", "curved"])
    def test_supports(self, st_):
        f = tf(st_, F1)
        j0, j1 = f.bbox
        a = e_adv(st_, f).values
        r = e_ret(st_, f).values
        assert np.all(a[: j0] == 0)
        assert np.all(r[j1 + 1:] == 0)
        assert np.max(np.abs(a)) > 0 and np.max(np.abs(r)) > 0

    @pytest.mark.parametrize("st_", [FLAT, CURVED], ids=["flat", "curved"])
    def test_inverse_of_k(self, st_):
        f = tf(st_, F1)
        a = e_adv(st_, f)
        # E_adv solves the leapfrog form exactly; the divergence form differs by O(h^2)
        assert a.residual() <= (1e-9 if st_ is FLAT else 5e-2 * np.max(np.abs(f.values)))

    def test_e_of_k_vanishes(self):
        """E K h = 0 for compactly supported h."""
        h = tf(FLAT, F1)
        Kh = np.nan_to_num(apply_kg(FLAT, h.values), nan=0.0)
        Kh[:2] = Kh[-2:] = 0
        EKh = e_causal(FLAT, Kh).values
        assert np.max(np.abs(EKh)) <= 1e-10

    def test_support_in_causal_hull(self):
        f = tf(FLAT, F1)
        E = e_causal(FLAT, f).values
        hull = causal_hull(f.support, FLAT, "both")
        assert np.max(np.abs(E[~hull])) <= 1e-4 * np.max(np.abs(E))

    def test_e_is_homogeneous(self):
        assert e_causal(FLAT, tf(FLAT, F1)).residual() <= 1e-10

    def test_boundary_source_rejected(self):
        v = np.zeros(FLAT.grid.shape)
        v[1, 3] = 1.0
        with pytest.raises(OutOfDomainError):
            e_adv(FLAT, v)


class TestSymplectic:
    @pytest.mark.parametrize("st_", [FLAT, CURVED], ids=["flat", "curved"])
    def test_antisymmetric(self, st_):
        f, h = tf(st_, F1), tf(st_, F2)
        a = symplectic_volume(st_, f, h)
        b = symplectic_volume(st_, h, f)
        assert abs(a + b) <= 1e-3 * abs(a)

    def test_antisymmetric_flat_exact(self):
        f, h = tf(FLAT, F1), tf(FLAT, F2)
        a, b = symplectic_volume(FLAT, f, h), symplectic_volume(FLAT, h, f)
        assert abs(a + b) <= 1e-12 * abs(a)

    def test_self_pairing_zero(self):
        f = tf(CURVED, F1)
        Ef = e_causal(CURVED, f)
        d = restrict_to_data(Ef, CURVED, CURVED.grid.t[128])
        assert symplectic_surface(d, d, CURVED) == 0.0

    @pytest.mark.parametrize("st_", [FLAT, CURVED], ids=["flat", "curved"])
    def test_surface_matches_volume(self, st_):
        f, h = tf(st_, F1), tf(st_, F2)
        Ef, Eh = e_causal(st_, f), e_causal(st_, h)
        vol = symplectic_volume(st_, f, h, Eh=Eh)
        for k in (5, 128, 250):
            t = st_.grid.t[k]
            s = symplectic_surface(restrict_to_data(Ef, st_, t), restrict_to_data(Eh, st_, t), st_)
            tol = 1e-10 if st_ is FLAT else 2e-2
            assert abs(s - vol) <= tol * abs(vol)

    def test_surface_slice_independent(self):
        f, h = tf(CURVED, F1), tf(CURVED, F2)
        Ef, Eh = e_causal(CURVED, f), e_causal(CURVED, h)
        vals = [symplectic_surface(restrict_to_data(Ef, CURVED, t), restrict_to_data(Eh, CURVED, t), CURVED)
                for t in CURVED.grid.t[[3, 60, 128, 200, 253]]]
        assert np.ptp(vals) <= 2e-2 * abs(vals[0])

    def test_curved_surface_vs_volume_converges(self):
        errs = []
        for n in (64, 128, 256):
            st_ = curved(n, 2 * n)
            f, h = tf(st_, F1), tf(st_, F2)
            Ef, Eh = e_causal(st_, f), e_causal(st_, h)
            t = st_.grid.t[st_.grid.n_t // 2]
            s = symplectic_surface(restrict_to_data(Ef, st_, t), restrict_to_data(Eh, st_, t), st_)
            errs.append(abs(s - symplectic_volume(st_, f, h, Eh=Eh)))
        assert errs[2] < errs[1] < errs[0]

    def test_momentum_flat(self):
        d = CauchyData(np.sin(FLAT.grid.x), np.cos(FLAT.grid.x), 2.5)
        assert np.array_equal(momentum(FLAT, d), d.pi)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_bilinear(self, a, b):
        f, h = tf(FLAT, F1), tf(FLAT, F2)
        lhs = symplectic_volume(FLAT, f * a + h * b, f)
        rhs = a * symplectic_volume(FLAT, f, f) + b * symplectic_volume(FLAT, h, f)
        assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))
