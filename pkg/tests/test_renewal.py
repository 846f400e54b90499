import numpy as np
import pytest

from towerlimits.errors import NumericalError, PreconditionError
from towerlimits.renewal import (
    RenewalSpec,
    boundary_identities,
    decompose_iterate,
    load_renewal_spec,
    make_scalar_spec,
    renewal_matches_masked_products,
    renewal_solve,
    save_renewal_spec,
    spec_from_tower,
    verify_perturbed_envelope,
    verify_renewal_limit,
)
from towerlimits.seq_algebra import CAUSAL, WeightedSeq, causal_invert, convolve, delta
from towerlimits.tower_core import build_finite_tower, two_cell_tower


def scalar_spec(probs, beta=4.0) -> RenewalSpec:
    coeffs = np.array([0.0] + list(probs))
    seq = WeightedSeq(0, len(coeffs) - 1, coeffs, max(beta, 1.5), CAUSAL)
    mu = float(np.dot(np.arange(len(coeffs)), coeffs))
    return RenewalSpec(R=seq, beta=beta, mu=mu, projection=np.array(1.0))


class TestRenewalSolve:
    def test_full_shift(self):
        spec = scalar_spec([1.0])
        T = renewal_solve(spec, 20)
        np.testing.assert_allclose(T.coeffs, 1.0, atol=0)

    def test_hand_recursion(self):
        spec = scalar_spec([0.5, 0.5])
        T = renewal_solve(spec, 4)
        np.testing.assert_allclose(T.coeffs, [1.0, 0.5, 0.75, 0.625, 0.6875], atol=1e-16)
        assert spec.mu == pytest.approx(1.5)

    def test_matches_causal_inversion_scalar(self):
        spec = make_scalar_spec(2.5, 400)
        T = renewal_solve(spec, 1000)
        dmr = delta(spec.R.gamma, 1, CAUSAL)
        base = np.zeros(len(spec.R.coeffs))
        base[0] = 1.0
        one_minus_r = WeightedSeq(0, len(base) - 1, base - spec.R.coeffs, spec.R.gamma, CAUSAL)
        inv = causal_invert(one_minus_r, 1000)
        np.testing.assert_allclose(T.coeffs, inv.coeffs, atol=1e-12)

    def test_matches_causal_inversion_matrix(self):
        spec = spec_from_tower(two_cell_tower(0.35))
        T = renewal_solve(spec, 1000)
        coeffs = -spec.R.coeffs.copy()
        coeffs[0] += np.eye(spec.dim)
        one_minus_r = WeightedSeq(0, len(coeffs) - 1, coeffs, spec.R.gamma, CAUSAL)
        inv = causal_invert(one_minus_r, 1000)
        assert np.max(np.abs(T.coeffs - inv.coeffs)) < 1e-12

    def test_convolution_inverse_property(self):
        spec = make_scalar_spec(3.0, 100)
        T = renewal_solve(spec, 300)
        coeffs = np.zeros(len(spec.R.coeffs))
        coeffs[0] = 1.0
        one_minus_r = WeightedSeq(0, len(coeffs) - 1, coeffs - spec.R.coeffs, spec.R.gamma, CAUSAL)
        prod = convolve(one_minus_r, T)
        expect = np.zeros(301)
        expect[0] = 1.0
        assert np.max(np.abs(prod.coeffs[:301] - expect)) < 1e-12

    def test_stochastic_bounds_and_cesaro(self):
        spec = make_scalar_spec(2.5, 300)
        T = renewal_solve(spec, 2000)
        assert np.all(T.coeffs >= 0) and np.all(T.coeffs <= 1.0 + 1e-12)
        cesaro = np.cumsum(T.coeffs) / np.arange(1, 2002)
        assert cesaro[-1] == pytest.approx(1.0 / spec.mu, rel=0.02)


class TestRenewalLimit:
    def test_full_shift_errors_vanish(self):
        spec = scalar_spec([1.0])
        rep = verify_renewal_limit(spec, 100)
        assert np.max(rep.errors) < 1e-15

    def test_polynomial_rate(self):
        # truncation horizon well beyond the fit window, else the missing
        # tail mass steepens the decay near the right edge
        spec = make_scalar_spec(2.5, 100_000)
        rep = verify_renewal_limit(spec, 10_000)
        assert rep.exponent == pytest.approx(1.5, abs=0.2)

    def test_finite_spec_hits_float_floor(self):
        spec = spec_from_tower(two_cell_tower(0.5))
        rep = verify_renewal_limit(spec, 200)
        assert np.max(rep.errors[60:]) < 1e-13
        # exponential decay: either the fit window is starved to the floor
        # (inf) or the fitted slope far exceeds any polynomial rate
        assert np.isinf(rep.exponent) or rep.exponent > 3.0


class TestPerturbedEnvelope:
    def test_lattice_twist_bounded(self):
        spec = scalar_spec([0.5, 0.5], beta=4.0)
        rep = verify_perturbed_envelope(spec, np.linspace(-0.3, 0.3, 7), 1000)
        assert np.isfinite(rep.C)
        # uncentered twist: M(t) ~ -i mu t violates Re M ~ c t^2 > 0, so the
        # left side saturates at 1/mu and C is grid-bound, not stable
        assert np.max(np.abs(rep.M_curve.imag)) > np.max(rep.M_curve.real)

    def test_centered_twist_constant_is_stable(self):
        spec = scalar_spec([0.5, 0.5], beta=4.0)
        c_seq = np.arange(3, dtype=float) - spec.mu  # mean-zero twist
        rep = verify_perturbed_envelope(
            spec, np.linspace(-0.3, 0.3, 7), 1000, c_seq=c_seq)
        assert np.isfinite(rep.C)
        assert np.all(rep.M_curve.real > 0)
        # doubling the horizon keeps the constant within a factor 2
        assert rep.C <= 2.0 * rep.C_half + 1e-9

    def test_M_curve_quadratic_positive(self):
        spec = make_scalar_spec(3.5, 500)
        ts = np.array([0.01, 0.02, 0.04])
        rep = verify_perturbed_envelope(spec, ts, 200)
        ratios = rep.M_curve.real / np.sort(ts) ** 2
        assert np.all(ratios > 0)
        assert np.max(ratios) / np.min(ratios) < 1.2

    def test_periodic_spec_rejected(self):
        # support on even return times only: R(z) singular at z = -1
        coeffs = np.zeros(5)
        coeffs[2] = coeffs[4] = 0.5
        seq = WeightedSeq(0, 4, coeffs, 2.5, CAUSAL)
        spec = RenewalSpec(R=seq, beta=2.5, mu=3.0, projection=np.array(1.0))
        with pytest.raises(NumericalError):
            verify_perturbed_envelope(spec, [0.1], 100)


class TestDecomposition:
    def test_single_cell_exact(self):
        t = build_finite_tower([1.0], [1], [[1.0]])
        for n in (0, 1, 5, 10):
            assert decompose_iterate(t, None, 0.0, n) < 1e-14

    def test_two_cell_untwisted(self):
        t = two_cell_tower(0.5)
        assert decompose_iterate(t, None, 0.0, 10) <= 1e-13

    def test_two_cell_twisted(self):
        t = two_cell_tower(0.5)
        f = np.array([0.3, -0.2, 1.7])
        assert decompose_iterate(t, f, 0.37, 20) <= 1e-12

    def test_three_cell_panel(self):
        t = build_finite_tower([1.0, 1.0, 1.0], [1, 2, 3], np.full((3, 3), 1 / 3))
        rng = np.random.default_rng(4)
        f = rng.standard_normal(t.n_states)
        for tt in (0.0, 0.37, 1.1):
            for n in (1, 7, 15):
                assert decompose_iterate(t, f, tt, n) <= 1e-12

    def test_renewal_equals_masked_products(self):
        assert renewal_matches_masked_products(two_cell_tower(0.3), 12) < 1e-13


class TestBoundaryIdentities:
    @pytest.mark.parametrize("tower", [
        two_cell_tower(0.5),
        two_cell_tower(0.2),
        build_finite_tower([1.0, 1.0, 1.0], [1, 2, 3], np.full((3, 3), 1 / 3)),
        build_finite_tower([1.0], [1], [[1.0]]),
    ])
    def test_identities_exact(self, tower):
        rep = boundary_identities(tower)
        assert rep.max_A_error < 1e-14
        assert rep.max_B_error < 1e-14
        assert rep.max_C_excess <= 1e-14


class TestSpecs:
    def test_tower_spec_mu_is_kac_mean(self):
        t = two_cell_tower(0.4)
        spec = spec_from_tower(t)
        # Kac: mu equals the mean return time of the base masses
        mu_expect = float(np.dot(t.masses, t.return_times) / t.masses.sum())
        assert spec.mu == pytest.approx(mu_expect, abs=1e-12)

    def test_scalar_spec_validation(self):
        with pytest.raises(PreconditionError):
            make_scalar_spec(1.5, 100)

    def test_round_trip(self, tmp_path):
        spec = spec_from_tower(two_cell_tower(0.45), beta=3.0)
        p = tmp_path / "spec.txt"
        save_renewal_spec(spec, p)
        spec2 = load_renewal_spec(p)
        assert spec2.beta == spec.beta
        assert spec2.mu == pytest.approx(spec.mu, abs=1e-12)
        np.testing.assert_allclose(spec2.R.coeffs, spec.R.coeffs, atol=0)

    def test_round_trip_scalar(self, tmp_path):
        spec = make_scalar_spec(2.5, 50)
        p = tmp_path / "sspec.txt"
        save_renewal_spec(spec, p)
        spec2 = load_renewal_spec(p)
        np.testing.assert_allclose(spec2.R.coeffs, spec.R.coeffs, atol=0)
        assert spec2.mu == pytest.approx(spec.mu, rel=1e-14)
