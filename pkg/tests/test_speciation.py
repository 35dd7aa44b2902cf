import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from replica_sync.diffusion import ConfigError, GaussianMixture, effective_precision
from replica_sync.dit import DiT, DitConfig, gating_functions
from replica_sync.linear_response import LayerRef, build_propagator, repartition_propagator
from replica_sync.numerics import bisect_root, rng_stream
from replica_sync.speciation import (ModalProjection, OutOfRegimeError, RoutingDominantModel,
                                     cumulative_gain, fixed_point_residual,
                                     fixed_point_residual_repartitioned, kappa, positivity_margin,
                                     project_modal, propagated_snr, snr, snr_expanded,
                                     solve_self_consistency, speciation_step, sync_gap)


def random_in_regime(rng, g):
    """A projection assembled from components with a positive margin."""
    while True:
        proj = ModalProjection.from_components(
            c=rng.uniform(0.1, 3.0), m=rng.normal(0, 2), lambda_mlp=rng.normal(0, 0.3),
            chi=rng.normal(0, 0.5), pi=rng.normal(0, 0.5), g=g)
        gamma = rng.uniform(0.1, 3.0)
        if positivity_margin(proj, gamma) > 1e-2:
            return proj, gamma


def spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + np.eye(n)


class TestProjection:
    def test_identity_covariance(self, rng):
        r = rng.standard_normal(5)
        r /= np.linalg.norm(r)
        proj = project_modal(r, np.eye(5), rng.standard_normal(5), np.eye(5))
        assert proj.c == pytest.approx(1.0, abs=1e-14)
        assert proj.eta == pytest.approx(1.0, abs=1e-14)

    def test_quadratic_form(self, rng):
        C = spd(rng, 4)
        r = np.array([0.5, -0.5, 0.5, 0.5])
        m = rng.standard_normal(4)
        proj = project_modal(r, C, m, np.eye(4))
        hand = sum(r[i] * C[i, j] * r[j] for i in range(4) for j in range(4))
        assert proj.c == pytest.approx(hand, abs=1e-14)
        assert proj.m == pytest.approx(sum(r[i] * m[i] for i in range(4)), abs=1e-14)

    def test_diagonal_covariance_vector(self, rng):
        d = rng.uniform(0.5, 2, 6)
        r = np.eye(6)[2]
        assert project_modal(r, d, np.zeros(6), np.eye(6)).c == d[2]

    def test_non_unit(self):
        with pytest.raises(ValueError):
            project_modal(np.ones(3), np.eye(3), np.zeros(3), np.eye(3))

    def test_components_assemble_eta(self):
        proj = ModalProjection.from_components(1.0, 0.3, 0.1, 0.2, 0.4, 0.5)
        rho, xi = gating_functions(0.5)
        assert abs(proj.eta - (1 + 0.1 + rho * 0.2 + xi * 0.4)) <= 1e-12

    def test_propagator_components(self):
        model = DiT(DitConfig())
        rng = rng_stream(0, "test-modal-propagator")
        spec = build_propagator(LayerRef.at(model, 0), rng.standard_normal((16, 32)), 0.6)
        r = rng.standard_normal(512)
        r /= np.linalg.norm(r)
        proj = project_modal(r, np.ones(512), np.zeros(512), spec)
        assert abs(proj.eta - (1 + proj.lambda_mlp + spec.rho * proj.chi + spec.xi * proj.pi)) <= 1e-12


class TestSelfConsistency:
    def test_kappa_one(self):
        assert solve_self_consistency(1.0) == 0.0

    def test_kappa_two(self):
        oracle = bisect_root(lambda u: u - 2 * math.tanh(u), 0.5, 3.0, 1e-14)
        assert abs(solve_self_consistency(2.0) - oracle) <= 1e-10
        assert abs(solve_self_consistency(2.0) - 1.91501) < 1e-5

    def test_subcritical(self):
        rng = rng_stream(0, "test-subcritical")
        for k in rng.uniform(0, 1, 100):
            assert solve_self_consistency(k) == 0.0

    def test_near_critical(self):
        eps = 1e-4
        assert abs(solve_self_consistency(1 + eps) / math.sqrt(3 * eps) - 1) <= 0.1

    def test_root_satisfies_equation(self):
        for k in (1.01, 1.5, 3.0, 10.0):
            u = solve_self_consistency(k)
            assert abs(u - k * math.tanh(u)) < 1e-10

    def test_monotone_and_continuous(self):
        ks = np.linspace(1.0, 4.0, 61)
        us = [solve_self_consistency(k) for k in ks]
        assert us[0] == 0.0
        assert np.all(np.diff(us) > 0)
        assert solve_self_consistency(1 + 1e-8) < 1e-3

    def test_negative(self):
        with pytest.raises(ValueError):
            solve_self_consistency(-0.1)


class TestKappaSNR:
    def test_no_separation(self):
        assert kappa(ModalProjection(c=1.0, m=0.0, eta=0.3)) == 0.0

    def test_hand_value(self):
        assert kappa(ModalProjection(c=0.5, m=1.0, eta=0.5), 1.0) == pytest.approx(1.6, abs=1e-14)

    @pytest.mark.parametrize("delta", [1e-9, -1e-9])
    def test_unit_gain_limit(self, delta):
        for gamma in (0.1, 1.0, 7.0):
            proj = ModalProjection(c=0.8, m=1.2, eta=1 + delta)
            assert kappa(proj, gamma) == pytest.approx(1.2 ** 2 / 0.8, rel=1e-8)

    def test_out_of_regime(self):
        with pytest.raises(OutOfRegimeError):
            kappa(ModalProjection(c=1.0, m=1.0, eta=3.0), 1.0)
        with pytest.raises(OutOfRegimeError):
            snr(ModalProjection(c=1.0, m=1.0, eta=2.0), 1.0)

    def test_gamma_positive(self):
        with pytest.raises(ConfigError):
            kappa(ModalProjection(c=1.0, m=1.0, eta=0.0), 0.0)

    def test_forms_agree(self):
        rng = rng_stream(0, "test-snr-forms")
        for _ in range(1000):
            g = rng.uniform(0, 1)
            proj, gamma = random_in_regime(rng, g)
            a = snr(proj, gamma)
            b = snr_expanded(proj, gamma, g)
            assert abs(a - b) <= 1e-12 * max(1.0, abs(a))

    def test_kappa_is_gamma_snr(self):
        rng = rng_stream(1, "test-kappa-snr")
        for _ in range(1000):
            proj, gamma = random_in_regime(rng, rng.uniform(0, 1))
            k = kappa(proj, gamma)
            assert abs(k - gamma * snr(proj, gamma)) <= 1e-12 * max(1.0, abs(k))

    def test_routing_ordering(self):
        for g in np.linspace(0, 1, 11):
            hi = snr(ModalProjection.from_components(1.0, 0.5, 0.02, 0.3, 0.1, g))
            lo = snr(ModalProjection.from_components(1.0, 0.5, 0.02, 0.1, 0.1, g))
            if g < 1:
                assert hi > lo
            else:
                assert hi == lo


class TestGainAndPropagation:
    def test_unit_gains(self):
        assert cumulative_gain([1.0] * 7) == 1.0

    def test_empty(self):
        assert cumulative_gain([]) == 1.0

    def test_cancellation(self):
        assert cumulative_gain([2.0, 0.5]) == 1.0

    def test_power(self):
        assert cumulative_gain([1.1] * 10) == pytest.approx(2.5937424601, abs=1e-10)

    def test_propagated(self):
        base = snr(ModalProjection(c=0.7, m=0.4, eta=0.9), 1.3)
        assert propagated_snr(1.0, 0.4, 0.7, 0.9, 1.3) == base
        assert propagated_snr(0.0, 0.4, 0.7, 0.9, 1.3) == 0.0
        assert propagated_snr(2.0, 0.4, 0.7, 0.9, 1.3) == pytest.approx(4 * base, rel=1e-14)


class TestSpeciationStep:
    def test_never_crosses(self):
        assert speciation_step(np.full(50, 0.5)) is None

    def test_linear_ramp(self):
        assert speciation_step(np.linspace(0, 2, 101)) == pytest.approx(50.0, abs=1e-12)

    def test_starts_above(self):
        assert speciation_step([1.5, 2.0]) == 0.0

    def test_non_finite(self):
        with pytest.raises(ValueError):
            speciation_step([0.1, np.nan])

    def test_gap(self):
        assert sync_gap(30.0, 30.0) == 0.0
        assert sync_gap(60, 45) == 15.0
        assert sync_gap(None, 45) is None
        assert sync_gap(60, None) is None


class TestFixedPoint:
    def test_origin(self, rng):
        mix = GaussianMixture(rng.standard_normal(4), spd(rng, 4))
        assert fixed_point_residual(np.zeros(4), rng.standard_normal((4, 4)), mix) == 0.0

    def test_scalar_fixed_point(self):
        c, m, eta, gamma = 0.5, 1.0, 0.5, 1.0
        u = solve_self_consistency(kappa(ModalProjection(c=c, m=m, eta=eta), gamma))
        mix = GaussianMixture([m], [c])
        assert fixed_point_residual([u * c / m], [[eta]], mix, gamma) < 1e-10
        assert fixed_point_residual([1.1 * u * c / m], [[eta]], mix, gamma) > 1e-3

    def test_single_mode_decoupling(self, rng):
        # C diagonal in the mode basis, m along the first mode: the vector
        # fixed point restricted to that mode is the scalar equation
        n = 5
        cdiag = rng.uniform(0.3, 1.5, n)
        m = np.zeros(n)
        m[0] = 1.3
        cdiag[0] = 0.5
        K = np.diag(rng.uniform(0.2, 0.9, n))
        K[0, 0] = 0.5
        gamma = 0.8
        proj = project_modal(np.eye(n)[0], np.diag(cdiag), m, K)
        u = solve_self_consistency(kappa(proj, gamma))
        assert u > 0
        v = np.zeros(n)
        v[0] = u * proj.c / proj.m
        assert fixed_point_residual(v, K, GaussianMixture(m, np.diag(cdiag)), gamma) < 1e-10

    def test_repartition_invariance(self):
        rng = rng_stream(0, "test-repartition")
        for _ in range(1000):
            n = int(rng.integers(2, 7))
            mix = GaussianMixture(rng.standard_normal(n), spd(rng, n))
            K = rng.standard_normal((n, n)) * 0.5
            gamma = rng.uniform(0.1, 3)
            v = rng.standard_normal(n)
            a = fixed_point_residual(v, K, mix, gamma)
            b = fixed_point_residual_repartitioned(v, repartition_propagator(K, mix, gamma), mix, gamma)
            assert abs(a - b) <= 1e-10

    def test_effective_precision_symmetric(self, rng):
        lam = effective_precision(GaussianMixture(rng.standard_normal(3), spd(rng, 3)))
        np.testing.assert_array_equal(lam, lam.T)


class TestRoutingDominant:
    G_GRID = np.round(np.linspace(0, 1, 11), 10)

    def test_gap_non_increasing(self):
        model = RoutingDominantModel()
        gaps = [model.gap_report(g).gap for g in self.G_GRID]
        assert all(gap is not None for gap in gaps)
        assert np.all(np.diff(gaps) <= 0)
        assert gaps[0] > 0 and abs(gaps[-1]) < 1e-12

    def test_split_vanishes_at_full_coupling(self):
        assert RoutingDominantModel().snr_split(1.0) == 0.0

    def test_split_proportional_within_five_percent(self):
        model = RoutingDominantModel()
        ratios = [model.snr_split(g) / gating_functions(g)[0] for g in self.G_GRID[:-1]]
        assert np.ptp(ratios) / np.mean(ratios) <= 0.05

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.05, 1.0), st.floats(1.5, 4.0))
    def test_deviation_first_order_in_routing_gain(self, scale, spread):
        # the split over rho is constant up to a correction linear in the gains
        def deviation(s):
            model = RoutingDominantModel(chi_hi=0.01 * spread * s, chi_lo=0.01 * s, lambda_mlp=0.0)
            r = np.array([model.snr_split(g) / gating_functions(g)[0] for g in self.G_GRID[:-1]])
            return np.ptp(r) / np.abs(r).mean()

        ratio = deviation(scale) / deviation(scale / 2)
        assert 1.8 <= ratio <= 2.2

    def test_report_serialises(self):
        rep = RoutingDominantModel().gap_report(0.3, layer=2).to_dict()
        assert rep["layer"] == 2 and not rep["censored"]
        assert set(rep["speciation_steps"]) == {"hi", "lo"}
        assert len(rep["kappa_curves"]["hi"]) == 101

    def test_censored_report(self):
        rep = RoutingDominantModel(m_init=1e-6, steps=10).gap_report(0.0)
        assert rep.censored and rep.to_dict()["gap"] is None
