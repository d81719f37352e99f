import numpy as np
import pytest

from kbrkit.embeddings import SampleSet, empirical_embedding
from kbrkit.kbr import (
    KbrConfig,
    iw_kbr_weights,
    kbr_posterior,
    original_kbr_weights,
    posterior_expectation,
)
from kbrkit.kernels import KernelSpec, gram, median_heuristic


def _random_instance(seed, n=5, d=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    kx = KernelSpec("gaussian", median_heuristic(x))
    G = gram(kx, x)
    g = gram(kx, x, rng.normal(size=(1, d)))[:, 0]
    return rng, G, g


class TestIwWeights:
    def test_unit_ratios_reduce_to_plain_ridge(self):
        _, G, g = _random_instance(0)
        lam = 0.2
        w = iw_kbr_weights(G, np.ones(5), g, lam)
        expected = np.linalg.solve(G + 5 * lam * np.eye(5), g)
        assert np.allclose(w, expected, atol=1e-12)

    def test_zero_ratios_give_zero_weights(self):
        _, G, g = _random_instance(1)
        w = iw_kbr_weights(G, np.zeros(5), g, 0.1)
        assert np.allclose(w, 0.0)

    def test_negative_ratio_rejected(self):
        _, G, g = _random_instance(2)
        with pytest.raises(ValueError, match="nonnegative"):
            iw_kbr_weights(G, np.array([1.0, -0.1, 1.0, 1.0, 1.0]), g, 0.1)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_oracle(self, seed):
        rng, G, g = _random_instance(seed)
        r = rng.uniform(0.0, 3.0, size=5)
        lam = float(rng.uniform(0.01, 1.0))
        w = iw_kbr_weights(G, r, g, lam)
        s = np.sqrt(r)
        M = np.diag(s) @ G @ np.diag(s) + 5 * lam * np.eye(5)
        expected = np.diag(s) @ np.linalg.inv(M) @ (s * g)
        assert np.max(np.abs(w - expected)) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_system_matrix_is_psd(self, seed):
        rng, G, _ = _random_instance(seed)
        r = rng.uniform(0.0, 3.0, size=5)
        s = np.sqrt(r)
        M = s[:, None] * G * s[None, :] + 5 * 0.1 * np.eye(5)
        assert np.allclose(M, M.T)
        assert np.linalg.eigvalsh(M).min() > 0

    def test_batched_columns_match_loop(self):
        rng, G, _ = _random_instance(3)
        r = rng.uniform(0.0, 2.0, size=5)
        g_table = rng.uniform(0.0, 1.0, size=(5, 4))
        W = iw_kbr_weights(G, r, g_table, 0.3)
        for j in range(4):
            assert np.allclose(W[:, j], iw_kbr_weights(G, r, g_table[:, j], 0.3))


class TestOriginalWeights:
    def _oracle(self, Psi, Phi, gamma, psi_t, lam):
        """Literal operator formula with explicit 1/n-normalized covariances."""
        n = Psi.shape[0]
        p = Psi.shape[1]
        CXX = Psi.T @ (gamma[:, None] * Psi) / n
        CXZ = Psi.T @ (gamma[:, None] * Phi) / n
        E = CXX @ np.linalg.solve(CXX @ CXX + lam * np.eye(p), CXZ)
        return E.T @ psi_t

    @pytest.mark.parametrize("seed", range(10))
    def test_feature_space_oracle_linear_kernel(self, seed):
        rng = np.random.default_rng(seed)
        n, p, q = 4, 2, 3
        Psi = rng.normal(size=(n, p))
        Phi = rng.normal(size=(n, q))
        gamma = rng.normal(size=n)
        psi_t = rng.normal(size=p)
        lam = float(rng.uniform(0.05, 0.5))
        w = original_kbr_weights(Psi @ Psi.T, gamma, Psi @ psi_t, lam)
        assert np.max(np.abs(Phi.T @ w - self._oracle(Psi, Phi, gamma, psi_t, lam))) < 1e-6

    def test_axis_aligned_gamma(self):
        rng = np.random.default_rng(20)
        Psi = rng.normal(size=(2, 2))
        Phi = rng.normal(size=(2, 2))
        psi_t = rng.normal(size=2)
        for i in range(2):
            gamma = np.zeros(2)
            gamma[i] = 1.7
            w = original_kbr_weights(Psi @ Psi.T, gamma, Psi @ psi_t, 0.2)
            assert np.max(np.abs(Phi.T @ w - self._oracle(Psi, Phi, gamma, psi_t, 0.2))) < 1e-6

    def test_unit_gamma_small_ridge_approaches_cme(self):
        rng = np.random.default_rng(4)
        Psi = rng.normal(size=(3, 3)) + 2 * np.eye(3)  # well conditioned
        Phi = rng.normal(size=(3, 2))
        psi_t = rng.normal(size=3)
        G = Psi @ Psi.T
        g = Psi @ psi_t
        gamma = np.ones(3)
        w_orig = original_kbr_weights(G, gamma, g, 1e-12, ridge_scale="none")
        w_cme = np.linalg.solve(G, g)
        assert np.max(np.abs(Phi.T @ w_orig - Phi.T @ w_cme)) < 1e-6

    def test_huge_ridge_kills_weights(self):
        rng, G, g = _random_instance(5)
        gamma = rng.normal(size=5)
        w = original_kbr_weights(G, gamma, g, 1e12)
        assert np.linalg.norm(w) < 1e-6

    def test_ridge_scale_options(self):
        rng, G, g = _random_instance(6)
        gamma = rng.normal(size=5)
        n, lam = 5, 0.3
        M = np.diag(gamma) @ G
        for scale, ridge in (("none", lam), ("n", n * lam), ("n2", n * n * lam)):
            w = original_kbr_weights(G, gamma, g, lam, ridge_scale=scale)
            expected = M @ np.linalg.solve(M @ M + ridge * np.eye(n), gamma * g)
            assert np.allclose(w, expected, atol=1e-10)


class TestKbrPosterior:
    def _samples(self, seed, n=50):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 1))
        z = np.tanh(x) + 0.1 * rng.normal(size=(n, 1))
        return SampleSet(x=x, z=z), rng

    def test_self_prior_matches_cme_weights(self):
        samples, _ = self._samples(0)
        prior = empirical_embedding(samples.z)
        cfg = KbrConfig(eta=1e-3, lam=1e-2, variant="iw")
        post = kbr_posterior(samples, prior, [0.2], cfg)
        from kbrkit.embeddings import fit_cme
        from kbrkit.kbr import resolve_kernels

        kx, kz = resolve_kernels(samples, cfg)
        w_cme = fit_cme(samples, cfg.lam, kx, kz).weights_at([[0.2]])[:, 0]
        rel = np.linalg.norm(post.embedding.weights - w_cme) / np.linalg.norm(w_cme)
        assert rel < 0.05

    def test_true_ratio_of_one_equals_unit_weights(self):
        samples, _ = self._samples(1, n=20)
        prior = empirical_embedding(samples.z)
        cfg_true = KbrConfig(eta=0.1, lam=0.1, variant="iw_true_ratio")
        post_true = kbr_posterior(samples, prior, [0.0], cfg_true, true_ratio=lambda z: np.ones(len(z)))
        from kbrkit.kbr import resolve_kernels

        kx, _ = resolve_kernels(samples, cfg_true)
        G = gram(kx, samples.x)
        g = gram(kx, samples.x, [[0.0]])[:, 0]
        expected = iw_kbr_weights(G, np.ones(20), g, 0.1)
        assert np.allclose(post_true.embedding.weights, expected, atol=1e-12)

    def test_true_ratio_requires_callback(self):
        samples, _ = self._samples(2, n=10)
        prior = empirical_embedding(samples.z)
        with pytest.raises(ValueError, match="callback"):
            kbr_posterior(samples, prior, [0.0], KbrConfig(variant="iw_true_ratio"))

    @pytest.mark.parametrize("variant", ["iw", "original"])
    def test_permutation_invariance(self, variant):
        samples, rng = self._samples(3, n=30)
        prior_pts = rng.normal(size=(25, 1))
        cfg = KbrConfig(eta=0.1, lam=0.1, variant=variant)
        perm = rng.permutation(30)
        shuffled = SampleSet(x=samples.x[perm], z=samples.z[perm])
        post_a = kbr_posterior(samples, empirical_embedding(prior_pts), [0.4], cfg)
        post_b = kbr_posterior(shuffled, empirical_embedding(prior_pts), [0.4], cfg)
        mean_a = posterior_expectation(post_a)
        mean_b = posterior_expectation(post_b)
        assert np.max(np.abs(mean_a - mean_b)) < 1e-10
        assert np.max(np.abs(post_a.embedding.weights[perm] - post_b.embedding.weights)) < 1e-10

    @pytest.mark.parametrize("variant", ["iw", "original"])
    def test_posterior_mean_bounded(self, variant):
        samples, rng = self._samples(4, n=25)
        prior = empirical_embedding(rng.normal(size=(20, 1)))
        post = kbr_posterior(samples, prior, [0.1], KbrConfig(variant=variant))
        mean = posterior_expectation(post)
        w = post.embedding.weights
        bound = np.max(np.linalg.norm(samples.z, axis=1)) * np.abs(w).sum()
        assert np.isfinite(mean).all()
        assert np.linalg.norm(mean) <= bound + 1e-12

    def test_far_conditioning_point_gives_near_zero_mean(self):
        samples, rng = self._samples(5, n=20)
        prior = empirical_embedding(rng.normal(size=(20, 1)))
        post = kbr_posterior(samples, prior, [250.0], KbrConfig())
        assert np.linalg.norm(posterior_expectation(post)) < 1e-6

    def test_pinned_bandwidths_respected(self):
        samples, _ = self._samples(6, n=15)
        prior = empirical_embedding(samples.z)
        cfg = KbrConfig(bandwidth_x=0.5, bandwidth_z=0.7)
        post = kbr_posterior(samples, prior, [0.0], cfg)
        assert post.embedding.kernel == KernelSpec("gaussian", 0.7)


class TestPosteriorExpectation:
    def _post(self, weights, anchors):
        from kbrkit.embeddings import MeanEmbedding
        from kbrkit.kbr import PosteriorEmbedding

        emb = MeanEmbedding(anchors=anchors, weights=weights, kernel=KernelSpec("gaussian", 1.0))
        return PosteriorEmbedding(embedding=emb, conditioning_point=np.zeros(1))

    def test_point_mass(self):
        post = self._post([0.0, 1.0, 0.0], [[1.0], [2.0], [3.0]])
        assert posterior_expectation(post)[0] == pytest.approx(2.0)

    def test_uniform_weights_give_sample_mean(self):
        anchors = np.array([[1.0], [2.0], [6.0]])
        post = self._post(np.full(3, 1 / 3), anchors)
        assert posterior_expectation(post)[0] == pytest.approx(3.0)

    def test_signed_weights_weighted_sum(self):
        post = self._post([0.5, -0.25, 0.1], [[1.0], [2.0], [3.0]])
        assert posterior_expectation(post)[0] == pytest.approx(0.5 - 0.5 + 0.3)

    def test_kernel_feature_returns_embedding(self):
        post = self._post([1.0], [[0.0]])
        assert posterior_expectation(post, feature="kernel") is post.embedding

    def test_unknown_feature(self):
        post = self._post([1.0], [[0.0]])
        with pytest.raises(ValueError):
            posterior_expectation(post, feature="quadratic")
