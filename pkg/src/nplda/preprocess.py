"""Centering, LDA and length normalization of embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

log = logging.getLogger(__name__)

EPS = 1e-12
LDA_RIDGE = 1e-6


@dataclass
class AffineTransform:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __call__(self, X):
        return np.asarray(X) @ self.weight.T + self.bias


@dataclass
class Frontend:
    """Affine projection followed by length normalization.

    This is the processed space shared by the generative PLDA, DPLDA and
    pairwise Gaussian back-ends. ``weight``/``bias`` fold centering into LDA.
    """

    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def transform(self, X):
        return length_normalize_rows(np.atleast_2d(X) @ self.weight.T + self.bias)


def make_frontend(mean, lda: AffineTransform) -> Frontend:
    """Compose ``x -> lda(x - mean)`` into a single affine map."""
    mean = np.asarray(mean, dtype=float)
    if lda.weight.shape[1] != mean.shape[0]:
        raise ValueError(f"LDA input dim {lda.weight.shape[1]} != mean dim {mean.shape[0]}")
    return Frontend(lda.weight.copy(), lda.bias - lda.weight @ mean)


def _vectors(set_or_array):
    if hasattr(set_or_array, "matrix"):
        return set_or_array.matrix
    return np.atleast_2d(np.asarray(set_or_array, dtype=float))


def estimate_centering(eset) -> np.ndarray:
    X = _vectors(eset)
    if X.shape[0] == 0:
        raise ValueError("cannot center an empty set")
    return X.mean(axis=0)


def estimate_lda(eset, out_dim: int, speakers=None) -> AffineTransform:
    """Fisher LDA from speaker-labelled embeddings.

    Rows are the leading generalized eigenvectors of between- vs within-class
    scatter, normalised so that ``w' S_w w = 1``. The bias maps the global
    mean to zero.
    """
    X = _vectors(eset)
    if speakers is None:
        speakers = eset.speakers
    speakers = np.asarray(speakers, dtype=object)
    if any(s is None for s in speakers):
        raise ValueError("LDA needs speaker labels on every embedding")
    labels, inv = np.unique(speakers.astype(str), return_inverse=True)
    n_spk = len(labels)
    D = X.shape[1]
    if n_spk < 2:
        raise ValueError("LDA needs at least 2 speakers")
    if out_dim < 1 or out_dim > min(D, n_spk - 1):
        raise ValueError(f"out_dim={out_dim} must be in [1, min(D={D}, "
                         f"n_speakers-1={n_spk - 1})]")

    mean = X.mean(axis=0)
    counts = np.bincount(inv)
    class_means = np.zeros((n_spk, D))
    np.add.at(class_means, inv, X)
    class_means /= counts[:, None]
    Xw = X - class_means[inv]
    Sw = Xw.T @ Xw / X.shape[0]
    Mb = (class_means - mean) * np.sqrt(counts)[:, None]
    Sb = Mb.T @ Mb / X.shape[0]

    ridge = LDA_RIDGE * np.trace(Sw) / D
    if ridge <= 0:
        ridge = LDA_RIDGE
    if np.linalg.matrix_rank(Sw) < D:
        log.warning("singular within-class scatter; adding ridge %.3g", ridge)
    Sw = Sw + ridge * np.eye(D)

    evals, evecs = eigh(Sb, Sw)
    order = np.argsort(evals)[::-1][:out_dim]
    W = evecs[:, order].T
    # deterministic sign: largest-magnitude entry of each row positive
    signs = np.sign(W[np.arange(out_dim), np.argmax(np.abs(W), axis=1)])
    W = W * signs[:, None]
    return AffineTransform(W, -W @ mean)


def length_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n <= EPS:
        raise ValueError("cannot length-normalize a near-zero vector")
    return v / n


def length_normalize_rows(X) -> np.ndarray:
    n = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(n <= EPS):
        raise ValueError("cannot length-normalize a near-zero vector")
    return X / n


def length_normalize_jacobian(v) -> np.ndarray:
    """d(v/|v|)/dv = (I - u u') / |v| with u = v/|v|."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n <= EPS:
        raise ValueError("length-norm Jacobian undefined at a near-zero vector")
    u = v / n
    return (np.eye(v.size) - np.outer(u, u)) / n


def default_lda_dim(D: int) -> int:
    """Heuristic processed dimension, roughly a third of the input."""
    return max(1, round(D / 3))
