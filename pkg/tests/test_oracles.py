import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advflow.errors import InputError, TiltError
from advflow.nn import ArchSpec, VelocityModel
from advflow.oracles import (FiniteDist, GaussianToy, centered_advantage, decompose_loss,
                             fisher_rao_condition_error, fisher_rao_direction, max_tilt,
                             rao_blackwell_check, reward_gain, tilt, zero_mean_tests)
from advflow.rng import make_rng

COIN = FiniteDist([0.0, 1.0], [0.5, 0.5], [1.0, 0.0])
seeds = st.integers(0, 2**20)


def _random(seed, n=None):
    rng = make_rng(seed, "dist")
    return FiniteDist.random(rng, n or int(rng.integers(2, 30)), min_prob=1e-4), rng


class TestFiniteDist:
    def test_rejects_unnormalized(self):
        with pytest.raises(InputError):
            FiniteDist([0.0, 1.0], [0.5, 0.6], [0.0, 0.0])

    def test_rejects_mismatch(self):
        with pytest.raises(InputError):
            FiniteDist([0.0, 1.0], [1.0], [0.0, 0.0])


class TestAdvantage:
    def test_constant_rewards(self):
        d = FiniteDist([0.0, 1.0, 2.0], [0.2, 0.3, 0.5], [3.0, 3.0, 3.0])
        np.testing.assert_array_equal(centered_advantage(d), 0.0)

    def test_coin(self):
        np.testing.assert_allclose(centered_advantage(COIN), [0.5, -0.5])

    @given(seeds)
    def test_mean_zero(self, seed):
        d, _ = _random(seed)
        assert abs(d.expect(centered_advantage(d))) < 1e-14


class TestTilt:
    def test_eta_zero(self):
        d, _ = _random(3)
        np.testing.assert_array_equal(tilt(d, 0.0).probs, d.probs)

    def test_coin(self):
        np.testing.assert_allclose(tilt(COIN, 1.0).probs, [0.75, 0.25])
        assert reward_gain(COIN, 1.0) == pytest.approx(0.25, abs=1e-15)
        assert COIN.reward_var() == 0.25

    def test_constant_rewards_no_gain(self):
        d = FiniteDist([0.0, 1.0], [0.3, 0.7], [2.0, 2.0])
        assert reward_gain(d, 5.0) == 0.0
        assert max_tilt(d) == math.inf

    @given(seeds, st.floats(0, 1))
    @settings(max_examples=200)
    def test_normalized_and_gain(self, seed, frac):
        d, _ = _random(seed)
        eta = frac * max_tilt(d)
        q = tilt(d, eta)
        assert abs(math.fsum(q.probs) - 1.0) <= 1e-12
        assert np.all(q.probs >= 0)
        expected = eta * d.reward_var()
        assert abs(reward_gain(d, eta) - expected) <= 1e-12 * max(expected, 1e-300) + 1e-15

    def test_boundary(self):
        d, _ = _random(11)
        bound = max_tilt(d)
        tilt(d, bound)
        with pytest.raises(TiltError) as exc:
            tilt(d, bound * (1 + 1e-9))
        assert exc.value.max_eta == bound
        assert exc.value.index == int(np.argmin(centered_advantage(d)))


class TestFisherRao:
    @given(seeds, st.floats(0, 1))
    @settings(max_examples=100)
    def test_step_is_tilt(self, seed, frac):
        d, _ = _random(seed)
        eta = frac * max_tilt(d)
        np.testing.assert_array_equal(d.probs + eta * fisher_rao_direction(d), tilt(d, eta).probs)

    def test_constant_rewards_zero_direction(self):
        d = FiniteDist([0.0, 1.0], [0.3, 0.7], [2.0, 2.0])
        np.testing.assert_array_equal(fisher_rao_direction(d), 0.0)

    @given(seeds)
    @settings(max_examples=50)
    def test_defining_condition(self, seed):
        d, rng = _random(seed)
        assert fisher_rao_condition_error(d, zero_mean_tests(rng, d, 50)) <= 1e-12

    def test_zero_probability_refused(self):
        with pytest.raises(InputError):
            fisher_rao_direction(FiniteDist([0.0, 1.0], [1.0, 0.0], [1.0, 0.0]))


class TestDecomposition:
    def test_eta_zero(self, rng):
        d = FiniteDist.random(rng, 8, dim=2)
        m = VelocityModel.init(ArchSpec(2, (8,)), 0)
        dec = decompose_loss(m, d, 0.0, 500, rng)
        assert dec.direct == dec.reward_independent

    def test_zero_advantage(self, rng):
        d = FiniteDist(rng.standard_normal((4, 2)), [0.25] * 4, [1.0] * 4)
        m = VelocityModel.init(ArchSpec(2, (8,)), 0)
        assert decompose_loss(m, d, 0.7, 500, rng).reward_dependent == 0.0

    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_recombination(self, seed):
        rng = make_rng(seed, "dec")
        d = FiniteDist.random(rng, 12, dim=2)
        m = VelocityModel.init(ArchSpec(2, (8,)), seed)
        assert decompose_loss(m, d, 0.5 * max_tilt(d), 1000, rng).rel_err <= 1e-12


class TestRaoBlackwell:
    def test_posterior_mean_1d(self):
        toy = GaussianToy(1.0, 2.0, t=0.5)
        # a = 0.5, var_xt = 0.25 * 2 + 0.25 = 0.75, gain = 0.5 * 2 / 0.75
        np.testing.assert_allclose(toy.posterior_mean(np.array([[0.5]])), [[1.0 + (4 / 3) * (0.5 - 0.5)]])
        np.testing.assert_allclose(toy.posterior_mean(np.array([[1.5]])), [[1.0 + 4 / 3]])

    def test_posterior_mean_matches_regression(self):
        toy = GaussianToy([0.5, -1.0], [[1.0, 0.3], [0.3, 0.5]], t=0.4)
        x0, xt = toy.sample(make_rng(0, "pm"), 200_000)
        X = np.hstack([xt, np.ones((len(xt), 1))])
        coef, *_ = np.linalg.lstsq(X, x0, rcond=None)
        grid = np.array([[0.0, 0.0], [1.0, -1.0]])
        np.testing.assert_allclose(np.hstack([grid, np.ones((2, 1))]) @ coef, toy.posterior_mean(grid),
                                   atol=0.02)

    def test_deterministic_prior(self):
        toy = GaussianToy(0.7, 0.0, t=0.5)
        rep = rao_blackwell_check(toy, VelocityModel.init(ArchSpec(1, (8,)), 0), 500, make_rng(0))
        assert rep.var_rollout == pytest.approx(rep.var_sample, rel=1e-9)
        assert rep.passed

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_variance_reduced(self, seed):
        toy = GaussianToy(0.0, 1.0, t=0.5)
        m = VelocityModel.init(ArchSpec(1, (16, 16)), (seed, 100))
        rep = rao_blackwell_check(toy, m, 10_000, make_rng(seed, "rb"))
        assert rep.passed, rep
        assert rep.var_rollout < rep.var_sample

    def test_model_dims_checked(self):
        with pytest.raises(InputError):
            rao_blackwell_check(GaussianToy(0.0, 1.0), VelocityModel.init(ArchSpec(2, (4,)), 0), 10,
                                make_rng(0))
