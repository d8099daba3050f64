import math

import mpmath as mp
import numpy as np
import pytest

from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rng_for
from rgp.errors import CalibrationError, ConfigError
from rgp.privacy import (DEFAULT_ORDERS, RdpAccountant, calibrate_sigma,
                         clip_per_sample, compose_epsilon, gaussian_perturb,
                         rdp_step)

mp.mp.dps = 60


def rdp_oracle(q, sigma, alpha):
    """Direct high-precision summation; no log-space tricks, no shared code."""
    q = mp.mpf(q)
    sigma = mp.mpf(sigma)
    total = mp.mpf(0)
    for j in range(alpha + 1):
        total += (mp.binomial(alpha, j) * (1 - q) ** (alpha - j) * q ** j
                  * mp.e ** (j * (j - 1) / (2 * sigma ** 2)))
    return float(mp.log(total) / (alpha - 1))


class TestClipping:
    def test_small_vector_unchanged(self):
        v = np.array([[0.3, 0.4]])  # norm 0.5 = C/2
        clipped, norms = clip_per_sample(v, 1.0)
        assert np.array_equal(clipped, v)
        assert norms[0] == 0.5

    def test_large_vector_scaled_to_threshold(self):
        v = np.array([[6.0, 8.0]])  # norm 10 = 2C
        clipped, norms = clip_per_sample(v, 5.0)
        assert abs(np.linalg.norm(clipped[0]) - 5.0) < 1e-12
        assert norms[0] == 10.0

    def test_batch_norms_and_directions(self):
        rng = rng_for(60)
        v = rng.standard_normal((5, 12)) * 3.0
        clipped, norms = clip_per_sample(v, 1.5)
        out_norms = np.linalg.norm(clipped, axis=1)
        assert (out_norms <= 1.5 + 1e-12).all()
        cosines = (clipped * v).sum(1) / (out_norms * norms)
        assert np.abs(cosines - 1.0).max() < 1e-12

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ConfigError, match="positive"):
            clip_per_sample(np.ones((1, 2)), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_clipped_norms_bounded(self, seed, clip_norm):
        rng = rng_for(seed)
        v = rng.standard_normal((8, 5)) * rng.uniform(0, 1000)
        clipped, _ = clip_per_sample(v, clip_norm)
        assert (np.linalg.norm(clipped, axis=1) <= clip_norm * (1 + 1e-12)).all()

    def test_sensitivity_brute_force(self):
        # removing any one sample moves the clipped sum by at most C
        rng = rng_for(61)
        clip = 0.7
        for _ in range(10):
            v = rng.standard_normal((9, 6)) * rng.uniform(0.1, 10)
            clipped, _ = clip_per_sample(v, clip)
            total = clipped.sum(0)
            for i in range(len(v)):
                drop = total - clipped[i]
                assert np.linalg.norm(total - drop) <= clip + 1e-9


class TestGaussianPerturb:
    def test_vanishing_noise_limit(self):
        rng = rng_for(62)
        v = rng.standard_normal(100)
        out = gaussian_perturb(v, 1e-12, 1.0, rng=7)
        assert np.abs(out - v).max() < 1e-9

    def test_empirical_variance(self):
        out = gaussian_perturb(np.zeros(1_000_000), 1.0, 2.0, rng=123)
        assert abs(out.var() - 4.0) < 0.02

    def test_fixed_seed_reproduces_bit_exactly(self):
        v = np.ones(64)
        a = gaussian_perturb(v, 0.5, 2.0, rng=99)
        b = gaussian_perturb(v, 0.5, 2.0, rng=99)
        assert np.array_equal(a, b)

    def test_bad_parameters_rejected(self):
        with pytest.raises(ConfigError):
            gaussian_perturb(np.zeros(3), 0.0, 1.0, rng=0)
        with pytest.raises(ConfigError):
            gaussian_perturb(np.zeros(3), 1.0, -1.0, rng=0)


class TestRdpStep:
    def test_no_subsampling_closed_form(self):
        for sigma in (0.5, 1.0, 3.0):
            for alpha in (2, 3, 17, 64):
                assert abs(rdp_step(1.0, sigma, alpha) - alpha / (2 * sigma ** 2)) < 1e-12

    def test_matches_direct_summation_oracle(self):
        value = rdp_step(0.01, 1.0, 2)
        oracle = rdp_oracle(0.01, 1.0, 2)
        assert abs(value - oracle) <= 1e-10 * oracle
        # frozen from the mpmath oracle at 60 digits
        assert value == pytest.approx(0.00017181342207454794, rel=1e-10)

    def test_oracle_grid(self):
        for q in (0.001, 0.05, 0.3):
            for sigma in (0.6, 1.0, 4.0):
                for alpha in (2, 5, 32):
                    mine = rdp_step(q, sigma, alpha)
                    ref = rdp_oracle(q, sigma, alpha)
                    assert abs(mine - ref) <= 1e-10 * max(ref, 1e-300)

    def test_monotone_in_q_and_sigma(self):
        qs = [0.001, 0.01, 0.05, 0.2, 0.9]
        sigmas = [0.5, 0.8, 1.5, 3.0, 8.0]
        for alpha in (2, 8, 32):
            for sigma in sigmas:
                vals = [rdp_step(q, sigma, alpha) for q in qs]
                assert (np.diff(vals) > 0).all()
            for q in qs:
                vals = [rdp_step(q, sigma, alpha) for sigma in sigmas]
                assert (np.diff(vals) < 0).all()

    def test_fractional_order_uses_bracketing_integers(self):
        q, sigma = 0.02, 1.2
        assert rdp_step(q, sigma, 1.5) == rdp_step(q, sigma, 2)
        expected = max(rdp_step(q, sigma, 7), rdp_step(q, sigma, 8))
        assert rdp_step(q, sigma, 7.5) == expected

    def test_domain_errors(self):
        with pytest.raises(ValueError, match="order"):
            rdp_step(0.1, 1.0, 1.0)
        with pytest.raises(ValueError, match="probability"):
            rdp_step(0.0, 1.0, 2)
        with pytest.raises(ValueError, match="sigma"):
            rdp_step(0.1, 0.0, 2)


class TestCompose:
    def test_undefined_before_first_step(self):
        with pytest.raises(ValueError, match="first step"):
            compose_epsilon(0.1, 1.0, 0, 1e-5)

    def test_single_step_no_subsampling_analytic(self):
        sigma, delta = 4.0, 1e-6
        expected = min(a / (2 * sigma ** 2) + math.log(1 / delta) / (a - 1)
                       for a in DEFAULT_ORDERS)
        eps, _ = compose_epsilon(1.0, sigma, 1, delta)
        assert abs(eps - expected) < 1e-12

    def test_monotone_in_steps(self):
        values = [compose_epsilon(0.02, 1.1, t, 1e-5)[0] for t in (1, 10, 100, 1000)]
        assert (np.diff(values) > 0).all()

    def test_monotone_in_q_and_sigma(self):
        base = compose_epsilon(0.02, 1.1, 500, 1e-5)[0]
        assert compose_epsilon(0.04, 1.1, 500, 1e-5)[0] >= base
        assert compose_epsilon(0.02, 1.5, 500, 1e-5)[0] <= base

    def test_cross_implementation_golden(self):
        eps, order = compose_epsilon(0.01, 1.0, 1000, 1e-5)
        # frozen from an independent mpmath reimplementation (60 digits)
        assert eps == pytest.approx(2.5383475454589216569, rel=1e-12)
        assert abs(eps - 2.5383475454589216569) / eps < 0.005


class TestCalibrate:
    def test_round_trip_below_target(self):
        for target in (0.5, 2.0, 8.0):
            sigma = calibrate_sigma(0.02, 400, target, 1e-5)
            eps, _ = compose_epsilon(0.02, sigma, 400, 1e-5)
            assert target * (1 - 1e-3) <= eps <= target

    def test_longer_training_needs_more_noise(self):
        s1 = calibrate_sigma(0.02, 200, 4.0, 1e-5)
        s2 = calibrate_sigma(0.02, 2000, 4.0, 1e-5)
        assert s2 > s1

    def test_golden_regression(self):
        sigma = calibrate_sigma(0.02, 500, 8.0, 1e-5)
        assert sigma == pytest.approx(0.7263844013214111, rel=1e-12)
        eps, _ = compose_epsilon(0.02, sigma, 500, 1e-5)
        assert 8.0 * (1 - 1e-3) <= eps <= 8.0

    def test_infeasible_target_rejected(self):
        with pytest.raises(CalibrationError):
            calibrate_sigma(0.5, 1000, 1e-9, 1e-5)

    def test_bad_target_rejected(self):
        with pytest.raises(ConfigError):
            calibrate_sigma(0.1, 100, 0.0, 1e-5)


class TestAccountant:
    def test_closed_form_at_full_sampling(self):
        acct = RdpAccountant(1.0, 2.0)
        acct.step(10)
        expected = min(10 * a / 8.0 + math.log(1e5) / (a - 1) for a in DEFAULT_ORDERS)
        assert abs(acct.epsilon(1e-5) - expected) < 1e-12

    def test_epsilon_monotone_in_steps(self):
        acct = RdpAccountant(0.05, 1.0)
        previous = 0.0
        for _ in range(5):
            acct.step(20)
            eps = acct.epsilon(1e-5)
            assert eps > previous
            previous = eps

    def test_divergences_non_negative_and_accumulate(self):
        acct = RdpAccountant(0.05, 1.0)
        assert (acct.rdp == 0).all()
        acct.step(3)
        assert (acct.rdp > 0).all()
        assert acct.steps == 3

    def test_undefined_before_first_step(self):
        acct = RdpAccountant(0.1, 1.0)
        with pytest.raises(ValueError, match="first step"):
            acct.epsilon(1e-5)

    def test_ledger_round_trip(self, tmp_path):
        acct = RdpAccountant(0.03, 1.7)
        acct.step(321)
        path = tmp_path / "ledger.txt"
        acct.save(path)
        loaded = RdpAccountant.load(path)
        assert loaded.q == acct.q
        assert loaded.sigma == acct.sigma
        assert loaded.steps == acct.steps
        assert np.array_equal(loaded.rdp, acct.rdp)
        assert loaded.epsilon(1e-5) == acct.epsilon(1e-5)

    def test_tampered_ledger_rejected(self, tmp_path):
        acct = RdpAccountant(0.03, 1.7)
        acct.step(5)
        path = tmp_path / "ledger.txt"
        acct.save(path)
        text = path.read_text().replace("steps=5", "steps=50")
        path.write_text(text)
        with pytest.raises(ConfigError, match="inconsistent"):
            RdpAccountant.load(path)

    def test_bad_parameters_rejected(self):
        with pytest.raises(ConfigError):
            RdpAccountant(0.0, 1.0)
        with pytest.raises(ConfigError):
            RdpAccountant(0.5, -1.0)
