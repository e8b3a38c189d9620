"""Pairwise Neural PLDA network.

Per input ``x``::

    v = W1 x + b1          affine, LDA-initialised
    u = v / |v|            length normalisation
    f = W2 u + b2          affine, PLDA-centering-initialised

and for a trial ``(e, t)``::

    s = f_e' Q f_e + f_t' Q f_t + 2 f_e' P f_t
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .io import ScoreSet
from .plda import GenerativePlda, derive_pq
from .preprocess import EPS, AffineTransform

LOG_BETAS = np.log([99.0, 199.0])

PARAM_NAMES = ("W1", "b1", "W2", "b2", "P", "Q", "theta")


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass
class NeuralPldaParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.array(getattr(self, f.name), dtype=float))
        d, D = self.W1.shape
        shapes = {"b1": (d,), "W2": (d, d), "b2": (d,), "P": (d, d), "Q": (d, d),
                  "theta": (2,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, "
                                 f"expected {shape}")

    @property
    def in_dim(self):
        return self.W1.shape[1]

    @property
    def dim(self):
        return self.W1.shape[0]

    def copy(self):
        return NeuralPldaParams(**{n: getattr(self, n).copy() for n in PARAM_NAMES})

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def symmetrize(self):
        self.P = _sym(self.P)
        self.Q = _sym(self.Q)


# Gradients mirror the parameter container field for field.
ParamGradients = NeuralPldaParams


def zero_gradients(p: NeuralPldaParams) -> NeuralPldaParams:
    return NeuralPldaParams(**{n: np.zeros_like(a) for n, a in p.items()})


def init_from_generative(mean, lda: AffineTransform, m: GenerativePlda) -> NeuralPldaParams:
    mean = np.asarray(mean, dtype=float)
    d, D = lda.weight.shape
    if mean.shape != (D,):
        raise ValueError(f"mean dim {mean.shape} does not match LDA input {D}")
    if m.dim != d:
        raise ValueError(f"PLDA dim {m.dim} does not match LDA output {d}")
    pq = derive_pq(m)
    return NeuralPldaParams(
        W1=lda.weight.copy(), b1=lda.bias - lda.weight @ mean,
        W2=np.eye(d), b2=-m.mu.copy(), P=pq.P, Q=pq.Q, theta=LOG_BETAS.copy())


def _random_orthonormal_rows(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((cols, rows)))
    return (q * np.sign(np.diag(r))).T


def init_random(D: int, d: int, seed: int, mean=None) -> NeuralPldaParams:
    """Random orthonormal layers and small symmetric P, Q.

    With ``mean`` given, ``b1 = -W1 mean`` so the first layer sees centered
    inputs; otherwise both biases start at zero.
    """
    if d > D:
        raise ValueError("d must not exceed D")
    rng = np.random.default_rng(seed)
    W1 = _random_orthonormal_rows(rng, d, D)
    W2 = _random_orthonormal_rows(rng, d, d)
    P = _sym(rng.standard_normal((d, d))) * 0.1
    Q = _sym(rng.standard_normal((d, d))) * 0.1
    b1 = np.zeros(d) if mean is None else -W1 @ np.asarray(mean, dtype=float)
    return NeuralPldaParams(W1=W1, b1=b1, W2=W2, b2=np.zeros(d),
                            P=P, Q=Q, theta=LOG_BETAS.copy())


@dataclass
class EmbedCache:
    X: np.ndarray  # raw inputs (n, D)
    norm: np.ndarray  # |v| (n,)
    U: np.ndarray  # length-normalised (n, d)
    F: np.ndarray  # network embedding (n, d)


def embed(p: NeuralPldaParams, X) -> EmbedCache:
    """Run the per-input layers on the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = X @ p.W1.T + p.b1
    norm = np.linalg.norm(V, axis=1)
    if np.any(norm <= EPS):
        raise ValueError("zero-norm activation at the length-normalisation layer")
    U = V / norm[:, None]
    return EmbedCache(X, norm, U, U @ p.W2.T + p.b2)


def pair_scores(p: NeuralPldaParams, Fe, Ft) -> np.ndarray:
    return (np.einsum("ij,jk,ik->i", Fe, p.Q, Fe) + np.einsum("ij,jk,ik->i", Ft, p.Q, Ft)
            + 2.0 * np.einsum("ij,jk,ik->i", Fe, p.P, Ft))


def forward(p: NeuralPldaParams, e_raw, t_raw) -> float:
    c = embed(p, np.vstack([e_raw, t_raw]))
    return float(pair_scores(p, c.F[:1], c.F[1:])[0])


@dataclass
class BatchCache:
    emb: EmbedCache
    enroll: np.ndarray  # row indices into emb
    test: np.ndarray


def forward_indexed(p: NeuralPldaParams, X, enroll, test):
    """Score trials given as row indices into ``X``; returns ``(scores, cache)``.

    Each distinct row is pushed through the network once.
    """
    enroll = np.asarray(enroll, dtype=np.intp)
    test = np.asarray(test, dtype=np.intp)
    rows, inv = np.unique(np.concatenate([enroll, test]), return_inverse=True)
    emb = embed(p, np.asarray(X)[rows])
    n = len(enroll)
    cache = BatchCache(emb, inv[:n], inv[n:])
    return pair_scores(p, emb.F[cache.enroll], emb.F[cache.test]), cache


def forward_batch(p: NeuralPldaParams, trials, eset) -> ScoreSet:
    if not trials:
        return ScoreSet([], np.zeros(0))
    ei = eset.positions([t.enroll_id for t in trials])
    ti = eset.positions([t.test_id for t in trials])
    scores, _ = forward_indexed(p, eset.matrix, ei, ti)
    return ScoreSet(list(trials), scores)


def backward(p: NeuralPldaParams, cache: BatchCache, dloss_dscore) -> NeuralPldaParams:
    """Gradient of ``sum_i g_i s_i`` w.r.t. every parameter except ``theta``.

    ``theta`` gradients belong to the loss and are left at zero here.
    """
    g = np.asarray(dloss_dscore, dtype=float)
    if g.shape != cache.enroll.shape:
        raise ValueError(f"got {g.shape[0] if g.ndim else 'scalar'} score gradients "
                         f"for {len(cache.enroll)} trials")
    emb = cache.emb
    Fe, Ft = emb.F[cache.enroll], emb.F[cache.test]
    ge, gt = g[:, None] * Fe, g[:, None] * Ft

    grads = zero_gradients(p)
    grads.Q = _sym(Fe.T @ ge + Ft.T @ gt)
    cross = Fe.T @ gt
    grads.P = cross + cross.T

    # ds/df for each side, accumulated per distinct input row
    dF = np.zeros_like(emb.F)
    np.add.at(dF, cache.enroll, 2.0 * (ge @ p.Q + gt @ p.P))
    np.add.at(dF, cache.test, 2.0 * (gt @ p.Q + ge @ p.P))

    grads.W2 = dF.T @ emb.U
    grads.b2 = dF.sum(axis=0)
    dU = dF @ p.W2
    # length-norm Jacobian (I - u u') / |v| applied row-wise
    dV = (dU - emb.U * np.sum(dU * emb.U, axis=1, keepdims=True)) / emb.norm[:, None]
    grads.W1 = dV.T @ emb.X
    grads.b1 = dV.sum(axis=0)
    return grads
