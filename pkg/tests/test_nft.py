import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advflow.errors import InputError
from advflow.nft import (NftBranchInputs, branch_vectors, draw_equivalence_samples,
                         equivalence_check, nft_branch_loss, nft_branch_per_sample, nft_expansion)
from advflow.nn import VelocityModel, grad_check
from advflow.rl import ModelTriple
from advflow.rng import make_rng


def _sample(rng, n=1):
    x0, eps = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
    t = rng.uniform(0.05, 1, n)
    return x0, (1 - t[:, None]) * x0 + t[:, None] * eps, t, rng.standard_normal((n, 2))


class TestBranchLoss:
    def test_neutral_reward_at_rollout(self, small_arch, rng):
        triple = ModelTriple.from_reference(VelocityModel.init(small_arch, 0))
        x0, xt, t, c = _sample(rng, 3)
        inputs = NftBranchInputs(0.7, np.full(3, 0.5))
        loss, dv, bv = nft_branch_per_sample(triple, inputs, x0, xt, t, c)
        np.testing.assert_allclose(loss, np.sum(bv.e**2, axis=1), rtol=1e-14)
        np.testing.assert_allclose(dv, 0.0, atol=1e-15)

    def test_beta_zero_has_no_gradient(self, triple, rng):
        x0, xt, t, c = _sample(rng, 4)
        _, g = nft_branch_loss(triple, NftBranchInputs(0.0, rng.uniform(size=4)), x0, xt, t, c)
        np.testing.assert_array_equal(g, 0.0)

    @given(beta=st.floats(0, 2), r=st.floats(0, 1), seed=st.integers(0, 2**16))
    @settings(max_examples=100, deadline=None)
    def test_expansion(self, beta, r, seed):
        rng = make_rng(seed, "exp")
        from advflow.nn import ArchSpec
        arch = ArchSpec(2, (6,), 2)
        triple = ModelTriple(*(VelocityModel.init(arch, (seed, k)) for k in range(3)))
        x0, xt, t, c = _sample(rng)
        inputs = NftBranchInputs(beta, np.array([r]))
        loss, _, bv = nft_branch_per_sample(triple, inputs, x0, xt, t, c)
        ref = nft_expansion(bv, beta, inputs.A)
        np.testing.assert_allclose(loss, ref, rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(ref).max())))

    def test_gradient(self, triple, rng):
        x0, xt, t, c = _sample(rng, 4)
        inputs = NftBranchInputs(0.5, rng.uniform(size=4))

        def closure(p):
            tr = ModelTriple(triple.learned.with_params(p), triple.rollout, triple.reference)
            return nft_branch_loss(tr, inputs, x0, xt, t, c)

        assert grad_check(triple.learned.params, closure).passed

    def test_input_validation(self, triple):
        with pytest.raises(InputError):
            NftBranchInputs(0.5, np.array([1.5]))
        with pytest.raises(InputError):
            branch_vectors(triple, [[0.0, 0.0]], [[0.0, 0.0]], 0.0, [[0.0, 0.0]])


class TestEquivalence:
    @pytest.mark.parametrize("beta", [0.1, 0.5, 1.0])
    def test_gradients_match(self, beta, triple):
        s = draw_equivalence_samples(make_rng(0, "eq", int(beta * 10)), triple.learned.arch, 100)
        rep = equivalence_check(triple, beta, s)
        assert rep.passed, rep
        assert rep.max_gap_formula_err < 1e-10

    def test_learned_equals_rollout_zero_diff(self, small_arch):
        triple = ModelTriple.from_reference(VelocityModel.init(small_arch, 3))
        s = draw_equivalence_samples(make_rng(1), small_arch, 50)
        assert equivalence_check(triple, 0.5, s).max_grad_abs_diff <= 1e-15

    def test_sample_shape_checks(self, triple):
        s = draw_equivalence_samples(make_rng(1), triple.learned.arch, 5)
        s["t"] = s["t"][:3]
        with pytest.raises(InputError):
            equivalence_check(triple, 0.5, s)
