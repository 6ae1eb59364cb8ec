import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lcqft.algebra import SolutionSpace
from lcqft.geometry import Bump, Perturbation, Region, VectorFieldX, tensor_bump
from lcqft.rce import (
    EVALUATORS, ExperimentalWarning, RceError, beta_on_weyl, commutator_source, cutoffs, default_config,
    delta_f, delta_k, divergence_test, diffeo_invariance_test, gauge_field, probe_data, rce_closed_form,
    rce_direct, rel_l2, smoothstep, stress_pairing, t_extend, t_inverse,
)
from lcqft.solver import SolverError, apply_kg, solve_cauchy, symplectic_surface

CFG = default_config(128, 256)
PROBES = probe_data(CFG, 3, seed=5)


class TestCutoffs:
    @pytest.mark.parametrize("order", [3, 5, 7])
    def test_smoothstep_ends(self, order):
        u = np.linspace(-0.5, 1.5, 41)
        s = smoothstep(u, order)
        assert s[0] == 0 and s[-1] == 1
        assert np.all(np.diff(s) >= 0)

    @given(st.floats(0, 1))
    def test_smoothstep_symmetry(self, u):
        assert smoothstep(u) + smoothstep(1 - u) == pytest.approx(1.0, abs=1e-14)

    def test_partition_of_unity(self):
        cut = cutoffs(Region.strip(0.4, 1.4), CFG.background.grid)
        assert np.all(cut.chi_adv + cut.chi_ret == 1)
        assert np.all(cut.chi_ret[: cut.j_ret + 1] == 1) and np.all(cut.chi_ret[cut.j_adv:] == 0)

    def test_thin_strip_rejected(self):
        g = CFG.background.grid
        with pytest.raises(RceError):
            cutoffs(Region.strip(1.0, 1.0 + 3 * g.dt), g)

    def test_commutator_in_layer(self):
        st0 = CFG.background
        phi = solve_cauchy(st0, PROBES[0]).values
        cut = CFG.cut_plus
        u = commutator_source(st0, phi, cut)
        j0, j1 = cut.layer
        assert np.all(u[:j0] == 0) and np.all(u[j1 + 1:] == 0)
        assert np.max(np.abs(u)) > 0


class TestStripRestriction:
    @pytest.mark.parametrize("branch", ["adv", "ret"])
    def test_round_trip(self, branch):
        st0 = CFG.background
        phi = solve_cauchy(st0, PROBES[1])
        tinv = t_inverse(st0, CFG.cut_minus, phi, branch)
        for via in ("data", "source"):
            back = t_extend(st0, tinv, via)
            assert np.max(np.abs(back.values - phi.values)) <= 1e-10 * np.max(np.abs(phi.values))

    def test_not_a_solution(self):
        rng = np.random.default_rng(0)
        with pytest.raises(SolverError):
            t_inverse(CFG.background, CFG.cut_minus, rng.normal(size=CFG.background.grid.shape))


class TestConfig:
    def test_curved_background_rejected(self):
        g = CFG.background.grid
        h = tensor_bump(g, Bump(2.5, 3.0, 0.9, 1.5))
        with pytest.raises(RceError):
            default_config(128, 256).with_(background=CFG.spacetime(0.1), perturbation=h)

    def test_perturbation_must_sit_between(self):
        with pytest.raises(RceError):
            default_config(128, 256, bump=Bump(1.5, 3.0, 0.9, 1.5))

    def test_order_of_regions(self):
        with pytest.raises(RceError):
            CFG.with_(n_minus=Region.strip(3.6, 4.6), n_plus=Region.strip(0.4, 1.4))


class TestEvaluators:
    def test_triple_agreement(self):
        F = {k: [fn(CFG, d) for d in PROBES] for k, fn in EVALUATORS.items()}
        for i, d in enumerate(PROBES):
            assert rel_l2(F["composed"][i], F["direct"][i], d) <= 1e-10
            assert rel_l2(F["closed_form"][i], F["direct"][i], d) <= 1e-10
            assert rel_l2(F["direct"][i], d) > 1e-3  # the map is not trivial
        assert rce_closed_form.last_discarded <= 1e-8

    @pytest.mark.parametrize("name", sorted(EVALUATORS))
    def test_background_is_identity(self, name):
        zero = CFG.with_(amplitude=0.0)
        for d in PROBES:
            assert rel_l2(EVALUATORS[name](zero, d), d) <= 1e-12

    def test_symplectic(self):
        st0 = CFG.background
        F = [rce_direct(CFG, d) for d in PROBES]
        s0 = symplectic_surface(PROBES[0], PROBES[1], st0)
        s1 = symplectic_surface(F[0], F[1], st0)
        assert abs(s1 - s0) <= 1e-4 * abs(s0)

    def test_self_convergence(self):
        out = []
        for n in (64, 128, 256):
            cfg = default_config(n, 2 * n)
            out.append(rce_direct(cfg, probe_data(cfg, 1, seed=5)[0]).phi)
        e1 = np.linalg.norm(out[1][::2] - out[0]) / np.linalg.norm(out[0])
        e2 = np.linalg.norm(out[2][::2] - out[1]) / np.linalg.norm(out[1])
        assert 3.4 < e1 / e2 < 4.6

    def test_linear(self):
        a, b = PROBES[:2]
        lhs = rce_direct(CFG, a * 2.0 + b)
        rhs = rce_direct(CFG, a) * 2.0 + rce_direct(CFG, b)
        assert (lhs - rhs).norm() <= 1e-12 * lhs.norm()

    def test_beta_on_weyl(self):
        sp = SolutionSpace(CFG.background, CFG.t_ref)
        i, j = sp.register(PROBES[0]), sp.register(PROBES[1])
        A, B = sp.weyl(i), sp.weyl(j)
        lhs = beta_on_weyl(CFG, A * B, evaluator="direct")
        rhs = beta_on_weyl(CFG, A, evaluator="direct") * beta_on_weyl(CFG, B, evaluator="direct")
        (k1, c1), = lhs.terms.items()
        (k2, c2), = rhs.terms.items()
        assert (sp.data(k1) - sp.data(k2)).norm() <= 1e-10 * sp.data(k1).norm()
        assert abs(c1 - c2) <= 1e-4


class TestFirstVariation:
    @pytest.mark.parametrize("xi", [0.0, 0.3])
    def test_delta_k_matches_difference_quotient(self, xi):
        cfg = default_config(128, 256, xi=xi)
        st0 = cfg.background
        phi = solve_cauchy(st0, PROBES[0]).values
        s = 1e-4
        kp = apply_kg(cfg.spacetime(s), phi, fill=0.0)
        km = apply_kg(cfg.spacetime(-s), phi, fill=0.0)
        fd = (kp - km) / (2 * s)
        an = delta_k(cfg)(phi)
        inner = slice(2, -2)
        assert np.max(np.abs(fd[inner] - an[inner])) <= 1e-6 * np.max(np.abs(an))

    def test_fd_vs_analytic_converges(self):
        errs = []
        for n in (64, 128, 256):
            cfg = default_config(n, 2 * n)
            d = probe_data(cfg, 1, seed=3)[0]
            an = delta_f(cfg, d, "analytic")
            fd = delta_f(cfg, d, "finite_difference")
            errs.append((an.data - fd.data).norm() / an.data.norm())
            assert not fd.inconclusive
        assert errs[2] <= 1e-2
        assert np.log2(errs[1] / errs[2]) >= 1.7

    def test_zero_perturbation(self):
        cfg = CFG.with_(perturbation=Perturbation.zero(CFG.background.grid))
        assert stress_pairing(cfg, PROBES[0], PROBES[1]) == 0.0


class TestStress:
    def test_three_forms(self):
        vals = {f: stress_pairing(CFG, PROBES[0], PROBES[1], f) for f in ("propagator", "integral", "tensor")}
        scale = max(abs(v) for v in vals.values())
        assert abs(vals["propagator"] - vals["integral"]) <= 1e-10 * scale
        assert abs(vals["tensor"] - vals["integral"]) <= 1e-2 * scale

    def test_symmetric(self):
        """dK is formally self-adjoint, so the pairing is symmetric in phi, psi."""
        a = stress_pairing(CFG, PROBES[0], PROBES[1], "integral")
        b = stress_pairing(CFG, PROBES[1], PROBES[0], "integral")
        assert abs(a - b) <= 1e-10 * abs(a)

    def test_experimental_warning(self):
        cfg = default_config(64, 128, xi=0.2)
        d = probe_data(cfg, 2, seed=1)
        with pytest.warns(ExperimentalWarning):
            stress_pairing(cfg, d[0], d[1], "tensor")

    def test_unknown_form(self):
        with pytest.raises(ValueError):
            stress_pairing(CFG, PROBES[0], PROBES[1], "other")


class TestGauge:
    def test_divergence_contrast(self):
        cs = [divergence_test(CFG, PROBES[0], PROBES[1], gauge_field(CFG, i))["contrast"] for i in range(5)]
        assert max(cs) <= 1e-2

    def test_contrast_order(self):
        cs = []
        for n in (64, 128):
            cfg = default_config(n, 2 * n)
            p = probe_data(cfg, 3, seed=5)
            cs.append(divergence_test(cfg, p[0], p[1], gauge_field(cfg, 2))["contrast"])
        assert 3.0 < cs[0] / cs[1] < 5.0

    def test_zero_field(self):
        X = VectorFieldX(Bump(2.5, 3.0, 0.5, 0.5), 0.0, 0.0)
        assert divergence_test(CFG, PROBES[0], PROBES[1], X)["contrast"] == 0.0

    def test_field_must_avoid_cauchy_regions(self):
        X = VectorFieldX(Bump(1.0, 3.0, 0.5, 0.5), 1.0, 0.0)
        with pytest.raises(RceError):
            divergence_test(CFG, PROBES[0], PROBES[1], X)

    def test_diffeo_invariance(self):
        rep = diffeo_invariance_test(CFG, gauge_field(CFG, 0), 0.02, PROBES)
        assert rep["pass"] and rep["relative"] <= 1e-2
        # the map moves data by much more than the discrepancy
        assert rep["relative_to_response"] < 0.2


def test_grid_independent_probes():
    a = probe_data(default_config(64, 128), 1, seed=9)[0]
    b = probe_data(default_config(128, 256), 1, seed=9)[0]
    assert np.allclose(a.phi, b.phi[::2], rtol=0, atol=1e-13)


def test_silences_nothing():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        stress_pairing(CFG, PROBES[0], PROBES[1], "tensor")
