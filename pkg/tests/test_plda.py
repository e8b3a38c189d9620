import numpy as np
import pytest

from nplda.io import Embedding, EmbeddingSet
from nplda.metrics import eer, min_c_primary
from nplda.plda import (
    GenerativePlda,
    ScoreMatrices,
    derive_pq,
    estimate_plda,
    llr_oracle,
    llr_oracle_batch,
    random_plda,
    sample_synthetic,
    score_pair,
    score_pairs,
)


def _block_inverse_pq(m):
    """P, Q read off the inverse of the 2d x 2d same-speaker joint covariance."""
    d = m.dim
    T, A = m.Sigma_tot, m.Sigma_ac
    Cinv = np.linalg.inv(np.block([[T, A], [A, T]]))
    Tinv = np.linalg.inv(T)
    return -Cinv[:d, d:], Tinv - Cinv[:d, :d]


class TestDerivePQ:
    def test_no_speaker_variability(self):
        m = GenerativePlda(np.zeros(3), np.zeros((3, 1)), np.eye(3))
        pq = derive_pq(m)
        np.testing.assert_array_equal(pq.P, 0)
        np.testing.assert_allclose(pq.Q, 0, atol=1e-15)

    def test_scalar_hand_case(self):
        m = GenerativePlda([0.0], [[np.sqrt(0.5)]], [[0.5]])
        pq = derive_pq(m)
        assert pq.Q[0, 0] == pytest.approx(-1 / 3, abs=1e-14)
        assert pq.P[0, 0] == pytest.approx(2 / 3, abs=1e-14)

    def test_block_inverse_oracle(self):
        for seed in range(5):
            m = random_plda(6, 3, seed)
            pq = derive_pq(m)
            P, Q = _block_inverse_pq(m)
            assert np.max(np.abs(pq.P - P)) < 1e-8
            assert np.max(np.abs(pq.Q - Q)) < 1e-8
            np.testing.assert_array_equal(pq.P, pq.P.T)

    def test_singular(self):
        m = GenerativePlda(np.zeros(2), np.zeros((2, 1)), np.diag([1.0, 1e-14]))
        with pytest.raises(np.linalg.LinAlgError):
            derive_pq(m)


class TestScorePair:
    def test_direct(self):
        pq = ScoreMatrices(np.eye(2), np.zeros((2, 2)))
        assert score_pair(pq, [1, 0], [1, 0]) == 2.0

    def test_zero(self):
        pq = ScoreMatrices(np.zeros((3, 3)), np.zeros((3, 3)))
        assert score_pair(pq, [1, 2, 3], [-1, 5, 0]) == 0.0

    def test_symmetry_exact(self):
        rng = np.random.default_rng(0)
        pq = derive_pq(random_plda(4, 2, 0))
        for _ in range(20):
            e, t = rng.normal(size=(2, 4))
            assert score_pair(pq, e, t) == score_pair(pq, t, e)

    def test_dimension_mismatch(self):
        pq = ScoreMatrices(np.eye(2), np.eye(2))
        with pytest.raises(ValueError):
            score_pair(pq, [1, 2, 3], [1, 2])

    def test_affine_equivalence_with_oracle(self):
        rng = np.random.default_rng(1)
        m = random_plda(5, 2, seed=3)
        pq = derive_pq(m)
        E = m.mu + rng.normal(size=(100, 5))
        T = m.mu + rng.normal(size=(100, 5))
        diff = score_pairs(pq, E - m.mu, T - m.mu) - 2 * llr_oracle_batch(m, E, T)
        assert np.ptp(diff) < 1e-8


class TestLlrOracle:
    def test_no_speaker_variability(self):
        m = GenerativePlda(np.zeros(2), np.zeros((2, 1)), np.eye(2))
        assert llr_oracle(m, [1.0, 2.0], [-3.0, 0.5]) == pytest.approx(0, abs=1e-12)

    def test_scalar_hand_case(self):
        m = GenerativePlda([0.0], [[np.sqrt(0.5)]], [[0.5]])
        assert llr_oracle(m, [0.0], [0.0]) == pytest.approx(-0.5 * np.log(0.75), abs=1e-12)
        assert llr_oracle(m, [0.0], [0.0]) == pytest.approx(0.14384, abs=1e-5)

    def test_swap(self):
        rng = np.random.default_rng(2)
        m = random_plda(4, 2, seed=0)
        for _ in range(10):
            e, t = rng.normal(size=(2, 4))
            assert abs(llr_oracle(m, e, t) - llr_oracle(m, t, e)) < 1e-12

    def test_metrics_agree_between_routes(self):
        rng = np.random.default_rng(3)
        m = random_plda(4, 2, seed=5)
        es = sample_synthetic(m, 30, 3, seed=1)
        X = es.matrix
        spk = np.array(es.speakers)
        i, j = np.triu_indices(len(X), 1)
        keep = rng.random(len(i)) < 0.3
        i, j = i[keep], j[keep]
        labels = spk[i] == spk[j]
        pq = derive_pq(m)
        s1 = score_pairs(pq, X[i] - m.mu, X[j] - m.mu)
        s2 = llr_oracle_batch(m, X[i], X[j])
        assert eer(s1, labels) == eer(2 * s2 + (s1 - 2 * s2).mean(), labels) or \
            abs(eer(s1, labels) - eer(s2, labels)) < 1e-12
        assert min_c_primary(s1, labels)[0] == min_c_primary(s2, labels)[0]


class TestEstimation:
    def test_recovers_between_covariance(self):
        true = random_plda(10, 3, seed=0)
        es = sample_synthetic(true, 500, 10, seed=1)
        est = estimate_plda(es, 3)
        target = true.Phi @ true.Phi.T
        rel = np.linalg.norm(est.Sigma_ac - target) / np.linalg.norm(target)
        assert rel < 0.15

    def test_loglik_monotone(self):
        for seed in range(3):
            true = random_plda(6, 2, seed=seed)
            es = sample_synthetic(true, 40, 4, seed=seed + 10)
            h = estimate_plda(es, 3).loglik_history
            assert len(h) >= 2
            assert np.all(np.diff(h) >= -1e-8 * np.abs(h[:-1]).max())

    def test_degenerate_identical(self):
        es = EmbeddingSet([Embedding(f"u{i}", np.ones(3), f"s{i}") for i in range(5)])
        m = estimate_plda(es, 1)
        assert np.all(np.isfinite(m.Sigma))
        assert np.linalg.eigvalsh(m.Sigma).min() > 0

    def test_rank_too_large(self):
        es = sample_synthetic(random_plda(3, 1, 0), 4, 2, seed=0)
        with pytest.raises(ValueError, match="rank"):
            estimate_plda(es, 4)

    def test_single_speaker(self):
        es = sample_synthetic(random_plda(3, 1, 0), 1, 5, seed=0)
        with pytest.raises(ValueError, match="2 speakers"):
            estimate_plda(es, 1)


class TestSampler:
    def test_counts(self):
        es = sample_synthetic(random_plda(3, 1, 0), 2, 3, seed=0)
        assert len(es) == 6
        assert len(set(es.speakers)) == 2

    def test_identity_covariance(self):
        m = GenerativePlda(np.zeros(4), np.zeros((4, 1)), np.eye(4))
        X = sample_synthetic(m, 500, 10, seed=7).matrix
        C = np.cov(X.T)
        assert np.linalg.norm(C - np.eye(4)) / np.linalg.norm(np.eye(4)) < 0.1

    def test_deterministic(self):
        m = random_plda(5, 2, 1)
        a = sample_synthetic(m, 3, 4, seed=11)
        b = sample_synthetic(m, 3, 4, seed=11)
        assert a.matrix.tobytes() == b.matrix.tobytes()
        assert [e.gender for e in a] == [e.gender for e in b]

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_synthetic(random_plda(3, 1, 0), 0, 2, seed=0)
