import numpy as np
import pytest

from nplda.io import Embedding, EmbeddingSet, Trial
from nplda.losses import SoftCostConfig, soft_cprimary
from nplda.network import (
    NeuralPldaParams,
    backward,
    forward,
    forward_batch,
    forward_indexed,
    init_from_generative,
    init_random,
)
from nplda.plda import GenerativePlda, derive_pq, random_plda, score_pairs
from nplda.preprocess import AffineTransform, make_frontend

H = 1e-5


def _random_instance(seed=0, D=6, d=3, N=16):
    rng = np.random.default_rng(seed)
    p = init_random(D, d, seed)
    p.b1 = rng.normal(size=d) * 0.3
    p.b2 = rng.normal(size=d) * 0.3
    p.theta = np.array([0.2, -0.1])
    X = rng.normal(size=(10, D))
    enroll = rng.integers(0, 10, N)
    test = rng.integers(0, 10, N)
    t = np.zeros(N)
    t[: N // 2] = 1
    return p, X, enroll, test, t


def _loss(p, X, enroll, test, t, cfg):
    s, cache = forward_indexed(p, X, enroll, test)
    return soft_cprimary(s, t, p.theta, cfg), cache


def _perturb(p, name, idx, h):
    q = p.copy()
    arr = getattr(q, name)
    if name in ("P", "Q"):
        # symmetric direction (E_ij + E_ji) / 2
        i, j = idx
        arr[i, j] += h / 2
        arr[j, i] += h / 2
    else:
        arr[idx] += h
    return q


class TestInit:
    def test_zero_speaker_model_scores_zero(self):
        d = 3
        m = GenerativePlda(np.zeros(d), np.zeros((d, 1)), np.eye(d))
        p = init_from_generative(np.zeros(d), AffineTransform(np.eye(d), np.zeros(d)), m)
        rng = np.random.default_rng(0)
        assert forward(p, rng.normal(size=d), rng.normal(size=d)) == 0.0

    def test_dimension_chain(self):
        m = random_plda(4, 2, 0)
        with pytest.raises(ValueError):
            init_from_generative(np.zeros(5), AffineTransform(np.eye(3, 5), np.zeros(3)), m)

    def test_random_deterministic(self):
        a, b = init_random(6, 3, 7), init_random(6, 3, 7)
        for (_, x), (_, y) in zip(a.items(), b.items()):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(init_random(6, 3, 8).W1, a.W1)

    def test_random_symmetric(self):
        p = init_random(6, 3, 1)
        np.testing.assert_array_equal(p.P, p.P.T)
        np.testing.assert_array_equal(p.Q, p.Q.T)

    def test_bad_shape(self):
        p = init_random(6, 3, 0)
        with pytest.raises(ValueError, match="theta"):
            NeuralPldaParams(p.W1, p.b1, p.W2, p.b2, p.P, p.Q, np.zeros(3))


class TestForward:
    def test_generative_equivalence(self):
        rng = np.random.default_rng(1)
        D, d = 8, 4
        X = rng.normal(size=(50, D)) + 2.0
        mean = X.mean(axis=0)
        lda = AffineTransform(rng.normal(size=(d, D)), rng.normal(size=d))
        m = random_plda(d, 2, seed=2)
        p = init_from_generative(mean, lda, m)
        fe = make_frontend(mean, lda)
        i, j = rng.integers(0, 50, (2, 500))
        s_net, _ = forward_indexed(p, X, i, j)
        Y = fe.transform(X) - m.mu
        s_ref = score_pairs(derive_pq(m), Y[i], Y[j])
        diff = s_net - s_ref
        assert np.max(np.abs(diff - diff.mean())) < 1e-10

    def test_swap_symmetry(self):
        p, X, *_ = _random_instance(3)
        for k in range(5):
            assert abs(forward(p, X[k], X[k + 1]) - forward(p, X[k + 1], X[k])) < 1e-12

    def test_zero_score_matrices(self):
        p, X, *_ = _random_instance(4)
        p.P[:] = 0
        p.Q[:] = 0
        assert forward(p, X[0], X[1]) == 0.0

    def test_zero_norm(self):
        p = init_random(3, 3, 0)
        with pytest.raises(ValueError, match="zero-norm"):
            forward(p, np.zeros(3), np.ones(3))

    def test_batch(self):
        p, X, *_ = _random_instance(5)
        es = EmbeddingSet([Embedding(f"u{k}", X[k]) for k in range(len(X))])
        one = forward_batch(p, [Trial("u0", "u3")], es)
        assert one.scores[0] == pytest.approx(forward(p, X[0], X[3]), abs=1e-12)
        assert len(forward_batch(p, [], es)) == 0
        with pytest.raises(KeyError):
            forward_batch(p, [Trial("u0", "nope")], es)


class TestBackward:
    def test_zero_upstream(self):
        p, X, e, t, _ = _random_instance(6)
        _, cache = forward_indexed(p, X, e, t)
        g = backward(p, cache, np.zeros(len(e)))
        for _, a in g.items():
            assert not a.any()

    def test_shape_mismatch(self):
        p, X, e, t, _ = _random_instance(6)
        _, cache = forward_indexed(p, X, e, t)
        with pytest.raises(ValueError):
            backward(p, cache, np.zeros(3))

    @pytest.mark.parametrize("name", ["W1", "b1", "W2", "b2", "P", "Q", "theta"])
    def test_finite_differences(self, name):
        p, X, e, t, labels = _random_instance(7)
        cfg = SoftCostConfig(alpha=2.0)
        (loss, ds, dth), cache = _loss(p, X, e, t, labels, cfg)
        g = backward(p, cache, ds)
        g.theta = dth
        analytic = getattr(g, name)
        for idx in np.ndindex(analytic.shape):
            if name in ("P", "Q") and idx[0] > idx[1]:
                continue
            lp = _loss(_perturb(p, name, idx, H), X, e, t, labels, cfg)[0][0]
            lm = _loss(_perturb(p, name, idx, -H), X, e, t, labels, cfg)[0][0]
            fd = (lp - lm) / (2 * H)
            err = abs(fd - analytic[idx])
            assert err < 1e-7 or err < 1e-4 * abs(fd), (name, idx, fd, analytic[idx])
