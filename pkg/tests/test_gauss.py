import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probemb.errors import InvalidArgumentError
from probemb.gauss import (LOG_VAR_FLOOR, GaussianEmbedding, LossParams, PromptWeights, csd,
                           csd_similarity, mix_prompts, total_uncertainty, weighted_mix)

finite = st.floats(-5, 5, allow_nan=False)
log_vars = st.floats(-6, 2, allow_nan=False)


@st.composite
def embeddings(draw, dim=None):
    d = dim if dim is not None else draw(st.integers(1, 6))
    mu = draw(st.lists(finite, min_size=d, max_size=d))
    lv = draw(st.lists(log_vars, min_size=d, max_size=d))
    return GaussianEmbedding(mu, lv)


@st.composite
def pairs(draw):
    d = draw(st.integers(1, 6))
    return draw(embeddings(d)), draw(embeddings(d))


def unit(gen, d):
    v = gen.normal(size=d)
    return v / np.linalg.norm(v)


class TestEmbedding:
    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            GaussianEmbedding([0.0, 1.0], [0.0])

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            GaussianEmbedding([], [])

    def test_nan_rejected(self):
        with pytest.raises(InvalidArgumentError):
            GaussianEmbedding([np.nan], [0.0])
        with pytest.raises(InvalidArgumentError):
            GaussianEmbedding([0.0], [np.nan])

    def test_zero_variance_is_floored(self):
        z = GaussianEmbedding.from_variance([1.0, 2.0], [0.0, 0.5])
        assert z.log_var[0] == LOG_VAR_FLOOR
        assert z.degenerate
        assert np.all(z.var > 0)

    def test_normalized_flag_checks_norm(self):
        with pytest.raises(InvalidArgumentError):
            GaussianEmbedding([1.0, 1.0], [0.0, 0.0], normalized=True)
        z = GaussianEmbedding.normalized_from([3.0, 4.0], [0.0, 0.0])
        assert z.normalized
        assert np.allclose(z.mu, [0.6, 0.8])

    def test_normalize_zero_vector(self):
        with pytest.raises(InvalidArgumentError):
            GaussianEmbedding.normalized_from([0.0, 0.0], [0.0, 0.0])

    def test_arrays_read_only(self):
        z = GaussianEmbedding([1.0], [0.0])
        with pytest.raises(ValueError):
            z.mu[0] = 2.0

    def test_input_not_aliased(self):
        mu = np.array([1.0, 2.0])
        z = GaussianEmbedding(mu, [0.0, 0.0])
        mu[0] = 9.0
        assert z.mu[0] == 1.0


class TestLossParams:
    def test_defaults(self):
        p = LossParams()
        assert (p.a, p.b, p.c) == (10.0, -10.0, 10.0)
        assert p.alpha1 == 1e-7 and p.alpha2 == 1e-3 and p.beta == 0.0
        assert p.eps_log == pytest.approx(-10.0)

    @pytest.mark.parametrize("kw", [{"a": 0.0}, {"c": -1.0}, {"eps_inc": 0.0}, {"alpha1": -1.0},
                                    {"alpha2": -1e-9}, {"beta": -0.5}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            LossParams(**kw)

    def test_from_eps_log(self):
        assert LossParams.from_eps_log(-5.0).eps_inc == pytest.approx(math.exp(-5.0))


class TestCsd:
    def test_identity_point(self):
        z = GaussianEmbedding.from_variance([0.3, -0.2], [0.0, 0.0])
        assert csd(z, z) == pytest.approx(0.0, abs=1e-12)

    def test_shared_mean(self):
        z1 = GaussianEmbedding.from_variance([1.0, 2.0], [0.1, 0.1])
        z2 = GaussianEmbedding.from_variance([1.0, 2.0], [0.1, 0.1])
        assert csd(z1, z2) == pytest.approx(0.4, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            csd(GaussianEmbedding([0.0], [0.0]), GaussianEmbedding([0.0, 0.0], [0.0, 0.0]))

    @given(pairs())
    def test_symmetric_nonnegative(self, p):
        z1, z2 = p
        assert csd(z1, z2) == csd(z2, z1)
        assert csd(z1, z2) >= 0

    @given(embeddings())
    def test_self_distance(self, z):
        assert csd(z, z) == pytest.approx(2 * total_uncertainty(z), rel=1e-12)


class TestSimilarity:
    def test_identical_points(self):
        z = GaussianEmbedding.normalized_from([1.0, 0.0], [LOG_VAR_FLOOR] * 2)
        assert csd_similarity(z, z) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        z1 = GaussianEmbedding.from_variance([1.0, 0.0], [0.1, 0.1], normalized=True)
        z2 = GaussianEmbedding.from_variance([0.0, 1.0], [0.1, 0.1], normalized=True)
        assert csd_similarity(z1, z2) == pytest.approx(-0.2, abs=1e-15)

    def test_requires_flag(self):
        z = GaussianEmbedding([1.0, 0.0], [0.0, 0.0])
        with pytest.raises(InvalidArgumentError):
            csd_similarity(z, z)

    def test_identity_on_random_pairs(self):
        gen = np.random.default_rng(3)
        for _ in range(200):
            d = int(gen.integers(1, 12))
            z1 = GaussianEmbedding(unit(gen, d), gen.uniform(-8, 1, d), normalized=True)
            z2 = GaussianEmbedding(unit(gen, d), gen.uniform(-8, 1, d), normalized=True)
            assert abs(csd_similarity(z1, z2) - (1 - 0.5 * csd(z1, z2))) < 1e-12


class TestUncertainty:
    def test_floor_is_zero(self):
        z = GaussianEmbedding.from_variance([0.0], [0.0])
        assert total_uncertainty(z) == pytest.approx(0.0, abs=1e-12)
        assert z.degenerate

    def test_sum(self):
        z = GaussianEmbedding.from_variance([0, 0, 0], [0.1, 0.2, 0.3])
        assert total_uncertainty(z) == pytest.approx(0.6, abs=1e-15)

    @given(embeddings(), embeddings())
    def test_additive_under_concatenation(self, a, b):
        cat = GaussianEmbedding(np.r_[a.mu, b.mu], np.r_[a.log_var, b.log_var])
        assert total_uncertainty(cat) == pytest.approx(
            total_uncertainty(a) + total_uncertainty(b), rel=1e-12)


class TestMixing:
    def test_single_prompt(self):
        z = GaussianEmbedding([1.0, 2.0], [0.1, -0.3])
        assert mix_prompts([z]) is z

    def test_identical_prompts(self):
        z = GaussianEmbedding([1.0, 2.0], [0.1, -0.3])
        m = mix_prompts([z, z])
        assert np.allclose(m.mu, z.mu, atol=1e-15)
        assert np.allclose(m.log_var, z.log_var, atol=1e-14)

    def test_two_prompt_example(self):
        z1 = GaussianEmbedding.from_variance([1.0, 0.0], [0.1, 0.1])
        z2 = GaussianEmbedding.from_variance([0.0, 1.0], [0.3, 0.3])
        m = mix_prompts([z1, z2])
        assert np.allclose(m.mu, [0.5, 0.5], atol=1e-15)
        assert np.allclose(m.var, [0.2, 0.2], atol=1e-15)
        assert not m.normalized

    def test_renormalize_flag(self):
        z1 = GaussianEmbedding.from_variance([1.0, 0.0], [0.1, 0.1])
        z2 = GaussianEmbedding.from_variance([0.0, 1.0], [0.3, 0.3])
        m = mix_prompts([z1, z2], renormalize=True)
        assert m.normalized
        assert np.linalg.norm(m.mu) == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            mix_prompts([])

    @settings(max_examples=50)
    @given(st.lists(embeddings(3), min_size=2, max_size=5), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, zs, r):
        shuffled = list(zs)
        r.shuffle(shuffled)
        a, b = mix_prompts(zs), mix_prompts(shuffled)
        assert np.allclose(a.mu, b.mu, atol=1e-12)
        assert np.allclose(a.var, b.var, rtol=1e-12)

    def test_one_hot_weights(self):
        zs = [GaussianEmbedding([float(i)], [0.1 * i]) for i in range(3)]
        assert weighted_mix(zs, [0.0, 1.0, 0.0]) is zs[1]

    @given(st.lists(embeddings(3), min_size=1, max_size=5))
    def test_uniform_weights_match_mix(self, zs):
        n = len(zs)
        a, b = weighted_mix(zs, np.full(n, 1.0 / n)), mix_prompts(zs)
        assert np.allclose(a.mu, b.mu, atol=1e-12)
        assert np.allclose(a.var, b.var, rtol=1e-12, atol=1e-300)

    def test_weighted_example(self):
        z1 = GaussianEmbedding.from_variance([0.0], [1.0])
        z2 = GaussianEmbedding.from_variance([4.0], [2.0])
        m = weighted_mix([z1, z2], [0.25, 0.75])
        assert m.mu[0] == pytest.approx(3.0, abs=1e-15)
        assert m.var[0] == pytest.approx(1.75, abs=1e-15)

    def test_weight_count_mismatch(self):
        z = GaussianEmbedding([0.0], [0.0])
        with pytest.raises(InvalidArgumentError):
            weighted_mix([z, z], [1.0])


class TestPromptWeights:
    def test_simplex(self):
        with pytest.raises(InvalidArgumentError):
            PromptWeights([0.5, 0.6])
        with pytest.raises(InvalidArgumentError):
            PromptWeights([1.2, -0.2])
        assert len(PromptWeights([0.25, 0.75])) == 2
