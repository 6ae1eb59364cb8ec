import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcqft.geometry import Bump, Embedding, Grid, Metric, Spacetime, tensor_bump
from lcqft.solver import TestFunction, symplectic_volume
from lcqft.states import (
    CutoffError, ModeBasis, StateError, ccr_residual, cocycle, gram_matrices, hadamard_diagonal,
    hadamard_diagonal_exact, min_eigen_ratio, occupation, pairing_count, pullback_state,
    quasifree_moment, smoothness_profile, thermal_state, two_point, two_point_matrix, vacuum_state,
    weyl_expectation, wick_power, wick_square,
)

GRID = Grid.slab(256, 512, 5.0)
FLAT = Spacetime.flat(GRID)
VAC = vacuum_state()
TH = thermal_state(beta=2.0)

# extended-precision mode sums (tests/oracles.py), frozen
VACUUM_DIAG = {0.5: -0.0915745791182526, 1.0: 0.0187432209580732, 2.0: 0.129061021034399}
THERMAL_MINUS_VACUUM = {2.0: 0.040898161869916, 0.5: 0.581570348540184, 5.0: 0.00127297915514019}


def causal_pairs(grid, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        w = rng.uniform(0.7, 1.0, size=4)
        tc = rng.uniform(0.3 + w[0], 1.6)
        lag = rng.uniform(1.2, 1.8)
        xc = rng.uniform(0, grid.L)
        f = TestFunction.from_function(grid, Bump(tc, xc, w[0], w[1]))
        h = TestFunction.from_function(grid, Bump(tc + lag, xc + rng.uniform(-0.4, 0.4) * lag, w[2], w[3]))
        out.append((f, h))
    return out


PAIRS = causal_pairs(GRID, 5, 0)


class TestBasis:
    def test_massless_rejected(self):
        with pytest.raises(StateError):
            ModeBasis(m=0.0)

    def test_occupation_large_beta(self):
        with np.errstate(over="raise"):
            n = occupation(ModeBasis(), 1e4)
        assert np.all(n >= 0) and np.max(n) < 1e-300

    def test_occupation_vacuum(self):
        assert np.all(occupation(ModeBasis(), None) == 0)

    def test_k_max_above_nyquist(self):
        f = PAIRS[0][0]
        with pytest.raises(CutoffError):
            two_point(vacuum_state(k_max=200), f, f, FLAT)

    def test_rough_function_trips_tail_check(self):
        v = np.zeros(GRID.shape)
        v[100:110, 50] = 1.0
        with pytest.raises(CutoffError):
            two_point(VAC, v, v, FLAT)

    def test_curved_rejected(self):
        met = tensor_bump(GRID, Bump(2.5, 3.0, 1.2, 1.5), (0.1, 0, 0)).apply(Metric.flat(GRID))
        f = PAIRS[0][0]
        with pytest.raises(StateError):
            two_point(VAC, f, f, Spacetime(GRID, met))


class TestCCR:
    @pytest.mark.parametrize("state", [VAC, TH], ids=["vacuum", "thermal"])
    def test_antisymmetric_part(self, state):
        worst = max(ccr_residual(state, f, h, symplectic_volume(FLAT, f, h), FLAT) for f, h in PAIRS)
        assert worst <= 1e-3

    def test_calibrated_sign(self):
        """w2(f,h) - w2(h,f) = +i sigma(Ef, Eh) with the adopted propagator."""
        f, h = PAIRS[1]
        sig = symplectic_volume(FLAT, f, h)
        d = two_point(VAC, f, h, FLAT) - two_point(VAC, h, f, FLAT)
        assert abs(sig) > 1e-2
        assert d.imag == pytest.approx(sig, rel=1e-3)
        assert abs(d.real) <= 1e-12 * abs(sig)

    def test_antisymmetric_part_is_state_independent(self):
        f, h = PAIRS[2]
        a = two_point(VAC, f, h, FLAT) - two_point(VAC, h, f, FLAT)
        b = two_point(TH, f, h, FLAT) - two_point(TH, h, f, FLAT)
        assert abs(a - b) <= 1e-12 * abs(a)

    def test_ccr_converges(self):
        errs = []
        for n in (128, 256):
            g = Grid.slab(n, 2 * n, 5.0)
            f, h = causal_pairs(g, 1, 3)[0]
            st_ = Spacetime.flat(g)
            errs.append(ccr_residual(vacuum_state(k_max=n // 2 - 1), f, h, symplectic_volume(st_, f, h), st_))
        assert 3.4 < errs[0] / errs[1] < 4.6


class TestPositivity:
    FS = [f for pair in PAIRS for f in pair]

    @pytest.mark.parametrize("state", [VAC, TH], ids=["vacuum", "thermal"])
    def test_gram_matrices(self, state):
        sym, W, weyl = gram_matrices(state, self.FS, FLAT)
        assert min_eigen_ratio(W) >= -1e-8
        assert min_eigen_ratio(weyl) >= -1e-8
        assert np.allclose(W, W.conj().T, rtol=0, atol=1e-12 * np.abs(W).max())

    def test_both_normalizations_positive(self):
        for conv in ("half", "full"):
            _, _, weyl = gram_matrices(VAC, self.FS, FLAT, convention=conv)
            assert min_eigen_ratio(weyl) >= -1e-8

    def test_half_matches_field_derivative(self):
        """-d^2/dl^2 omega(W(l Ef)) at 0 equals w2(f, f) only for the factor 1/2."""
        f = PAIRS[0][0]
        w = two_point(VAC, f, f, FLAT).real
        eps = 1e-3
        for conv, factor in (("half", 1.0), ("full", 2.0)):
            vals = [weyl_expectation(VAC, f * s, FLAT, conv) for s in (-eps, 0.0, eps)]
            second = -(vals[0] - 2 * vals[1] + vals[2]) / eps ** 2
            assert second == pytest.approx(factor * w, rel=1e-5)

    @settings(max_examples=10, deadline=None)
    @given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
    def test_quadratic_form_nonnegative(self, c):
        fs = [PAIRS[i][0] for i in range(4)]
        W = two_point_matrix(TH, fs, fs, FLAT)
        c = np.asarray(c)
        assert (c @ W @ c).real >= -1e-10 * np.trace(W).real


class TestPullback:
    def test_pullback_matches_parent(self):
        N = FLAT.sub_slab(64, 448)
        psi = Embedding(N, FLAT, 64, 17)
        pb = pullback_state(psi, VAC)
        f = TestFunction.from_function(N.grid, Bump(2.0, 2.0, 0.8, 0.9))
        h = TestFunction.from_function(N.grid, Bump(2.8, 3.0, 0.8, 0.9))
        a = two_point_matrix(pb, [f, h], [f, h])
        b = two_point_matrix(VAC, [psi.push_forward(f.values), psi.push_forward(h.values)],
                             [psi.push_forward(f.values), psi.push_forward(h.values)], FLAT)
        assert np.max(np.abs(a - b)) <= 1e-14 * np.max(np.abs(b))
        assert pb.label == "pullback(vacuum)"

    def test_translation_invariance(self):
        """The vacuum is invariant under the translations of the cylinder."""
        psi = Embedding(FLAT, FLAT, 0, 40)
        f, h = PAIRS[0]
        a = two_point(VAC, f, h, FLAT)
        b = two_point(VAC, psi.push_forward(f.values), psi.push_forward(h.values), FLAT)
        assert abs(a - b) <= 1e-12 * abs(a)


class TestHadamard:
    @pytest.mark.parametrize("mu", sorted(VACUUM_DIAG))
    def test_vacuum_diagonal_oracle(self, mu):
        f = hadamard_diagonal(VAC, mu, GRID)
        assert f.values.shape == GRID.shape
        assert f.values[0, 0] == pytest.approx(VACUUM_DIAG[mu], abs=1e-7)
        assert hadamard_diagonal_exact(VAC, mu) == pytest.approx(VACUUM_DIAG[mu], abs=1e-6)

    @pytest.mark.parametrize("beta", sorted(THERMAL_MINUS_VACUUM))
    def test_cocycle_oracle(self, beta):
        B = cocycle(thermal_state(beta=beta), VAC, GRID)
        assert B.values[0, 0] == pytest.approx(THERMAL_MINUS_VACUUM[beta], rel=1e-10)

    @pytest.mark.parametrize("beta", [0.5, 2.0, 5.0])
    def test_trivialization(self, beta):
        th = thermal_state(beta=beta)
        B = cocycle(th, VAC, GRID)
        diff = hadamard_diagonal(th, 1.0, GRID) - hadamard_diagonal(VAC, 1.0, GRID)
        assert np.max(np.abs(diff.values - B.values)) <= 1e-3 * abs(B.values[0, 0])

    def test_cocycle_identity(self):
        a, b, c = VAC, thermal_state(beta=1.0), thermal_state(beta=3.0)
        s = cocycle(a, b, GRID).values + cocycle(b, c, GRID).values + cocycle(c, a, GRID).values
        assert np.max(np.abs(s)) <= 1e-12

    def test_cocycle_antisymmetric(self):
        assert np.max(np.abs(cocycle(VAC, TH, GRID).values + cocycle(TH, VAC, GRID).values)) == 0

    @given(st.floats(0.1, 10), st.floats(0.1, 10))
    @settings(max_examples=10, deadline=None)
    def test_mu_shift(self, mu1, mu2):
        d = hadamard_diagonal(VAC, mu2, GRID).values - hadamard_diagonal(VAC, mu1, GRID).values
        assert np.max(np.abs(d - np.log(mu2 / mu1) / (2 * np.pi))) <= 1e-6

    def test_mu_must_be_positive(self):
        with pytest.raises(StateError):
            hadamard_diagonal(VAC, 0.0, GRID)

    def test_extrapolation_noise_reported(self):
        f = hadamard_diagonal(TH, 1.0, GRID)
        assert 0 < f.noise < 1e-6
        assert f.info["separations_dx"] == [4, 2, 1]

    def test_difference_is_smooth(self):
        prof = smoothness_profile(TH, VAC)
        # faster than any power: compare with n^-6 far out
        assert prof[40] * 40 ** 6 < prof[10] * 10 ** 6 * 1e-3


class TestWick:
    def test_wick_square_is_hadamard_diagonal(self):
        a = wick_square(TH, 1.3, GRID).values
        b = hadamard_diagonal(TH, 1.3, GRID).values
        assert np.array_equal(a, b)

    def test_powers_against_generating_function(self):
        """Coefficients of exp(l^2 f / 2) from sympy (tests/oracles.py): 1, 0, f, 0, 3 f^2."""
        f = wick_square(TH, 1.0, GRID).values
        expected = {0: np.ones_like(f), 1: 0 * f, 2: f, 3: 0 * f, 4: 3 * f ** 2}
        for n, v in expected.items():
            assert np.allclose(wick_power(TH, 1.0, n, GRID), v, rtol=1e-15, atol=0)

    def test_power_range(self):
        with pytest.raises(StateError):
            wick_power(VAC, 1.0, 5, GRID)


class TestMoments:
    @given(st.integers(0, 5))
    def test_pairing_count(self, k):
        n = 2 * k
        assert quasifree_moment(lambda i, j: 1.0, n) == pairing_count(n) == math.prod(range(n - 1, 0, -2))

    @given(st.integers(0, 4))
    def test_odd_vanish(self, k):
        assert quasifree_moment(lambda i, j: 1.0, 2 * k + 1) == 0

    def test_four_point(self):
        W = np.arange(16.0).reshape(4, 4) + 1j
        got = quasifree_moment(lambda i, j: W[i, j], 4)
        assert got == W[0, 1] * W[2, 3] + W[0, 2] * W[1, 3] + W[0, 3] * W[1, 2]
