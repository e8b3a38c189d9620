"""Generative PLDA: ``eta = mu + Phi w + eps``, ``w ~ N(0, I)``, ``eps ~ N(0, Sigma)``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .io import Embedding, EmbeddingSet

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
MAX_COND = 1e12
EM_TOL = 1e-6
EM_MAX_ITER = 50
LOG2PI = np.log(2 * np.pi)


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass
class GenerativePlda:
    mu: np.ndarray  # (d,)
    Phi: np.ndarray  # (d, r)
    Sigma: np.ndarray  # (d, d)
    loglik_history: list = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.Phi = np.asarray(self.Phi, dtype=float).reshape(len(self.mu), -1)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        d = len(self.mu)
        if self.Sigma.shape != (d, d):
            raise ValueError(f"Sigma shape {self.Sigma.shape} != ({d}, {d})")
        if self.Phi.shape[1] > d:
            raise ValueError("PLDA rank exceeds dimension")

    @property
    def dim(self):
        return len(self.mu)

    @property
    def rank(self):
        return self.Phi.shape[1]

    @property
    def Sigma_ac(self):
        return self.Phi @ self.Phi.T

    @property
    def Sigma_tot(self):
        return self.Sigma_ac + self.Sigma


@dataclass
class ScoreMatrices:
    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.P = _sym(np.asarray(self.P, dtype=float))
        self.Q = _sym(np.asarray(self.Q, dtype=float))


def _checked_inv(M, what):
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > MAX_COND:
        raise np.linalg.LinAlgError(f"{what} is singular (condition number {c:.3g})")
    return np.linalg.inv(M)


def derive_pq(m: GenerativePlda) -> ScoreMatrices:
    T, A = m.Sigma_tot, m.Sigma_ac
    T_inv = _checked_inv(T, "Sigma_tot")
    S_inv = _checked_inv(T - A @ T_inv @ A, "Sigma_tot - Sigma_ac Sigma_tot^-1 Sigma_ac")
    return ScoreMatrices(P=T_inv @ A @ S_inv, Q=T_inv - S_inv)


def score_pair(pq: ScoreMatrices, e, t) -> float:
    """``e'Qe + t'Qt + 2 e'Pt`` for centered processed vectors."""
    e = np.asarray(e, dtype=float)
    t = np.asarray(t, dtype=float)
    d = pq.P.shape[0]
    if e.shape != (d,) or t.shape != (d,):
        raise ValueError(f"expected vectors of dim {d}, got {e.shape} and {t.shape}")
    # both cross orderings summed so that swapping e and t is bit-exact
    return float((e @ pq.Q @ e + t @ pq.Q @ t) + (e @ pq.P @ t + t @ pq.P @ e))


def score_pairs(pq: ScoreMatrices, E, T) -> np.ndarray:
    """Row-wise :func:`score_pair` for (N, d) arrays."""
    E = np.atleast_2d(E)
    T = np.atleast_2d(T)
    if E.shape != T.shape or E.shape[1] != pq.P.shape[0]:
        raise ValueError("dimension mismatch")
    return ((np.einsum("ij,jk,ik->i", E, pq.Q, E) + np.einsum("ij,jk,ik->i", T, pq.Q, T))
            + (np.einsum("ij,jk,ik->i", E, pq.P, T) + np.einsum("ij,jk,ik->i", T, pq.P, E)))


def _joint_logpdf(Z, C):
    try:
        cf = cho_factor(C, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("joint covariance is not positive definite") from None
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    maha = np.einsum("ij,ji->i", Z, cho_solve(cf, Z.T))
    return -0.5 * (Z.shape[1] * LOG2PI + logdet + maha)


def llr_oracle_batch(m: GenerativePlda, E, T) -> np.ndarray:
    """Exact same-speaker vs different-speaker log-likelihood ratio.

    Evaluates both 2d-dimensional joint Gaussians directly via Cholesky
    factors; used as an independent check on the P/Q scoring route.
    """
    E = np.atleast_2d(np.asarray(E, dtype=float))
    T = np.atleast_2d(np.asarray(T, dtype=float))
    d = m.dim
    Z = np.hstack([E - m.mu, T - m.mu])
    tot, ac = m.Sigma_tot, m.Sigma_ac
    zero = np.zeros((d, d))
    C_same = np.block([[tot, ac], [ac, tot]])
    C_diff = np.block([[tot, zero], [zero, tot]])
    return _joint_logpdf(Z, C_same) - _joint_logpdf(Z, C_diff)


def llr_oracle(m: GenerativePlda, e, t) -> float:
    return float(llr_oracle_batch(m, e, t)[0])


# ---------------------------------------------------------------------------
# EM estimation


def _floor_cov(S):
    S = _sym(S)
    w, V = np.linalg.eigh(S)
    floor = max(SIGMA_FLOOR * w.max(), 1e-10)
    if np.any(w < floor):
        w = np.maximum(w, floor)
        S = _sym((V * w) @ V.T)
    return S


class _SpeakerStats:
    def __init__(self, X, inv, mu):
        self.Xc = X - mu
        self.N, self.d = X.shape
        self.counts = np.bincount(inv).astype(float)
        self.sums = np.zeros((len(self.counts), self.d))
        np.add.at(self.sums, inv, self.Xc)
        self.scatter = self.Xc.T @ self.Xc

    def posteriors(self, Phi, Sigma):
        """Per-speaker posterior mean, covariance and the data log-likelihood."""
        r = Phi.shape[1]
        cf = cho_factor(Sigma, lower=True)
        SiPhi = cho_solve(cf, Phi)
        A = Phi.T @ SiPhi
        B = self.sums @ SiPhi  # (S, r): Phi' Sigma^-1 sum_j x_j
        L = np.eye(r)[None] + self.counts[:, None, None] * A[None]
        L_inv = np.linalg.inv(L)
        Ew = np.einsum("sij,sj->si", L_inv, B)
        _, logdet_L = np.linalg.slogdet(L)
        logdet_S = 2.0 * np.sum(np.log(np.diag(cf[0])))
        tr = np.sum(cho_solve(cf, self.scatter).diagonal())
        ll = (-0.5 * (self.N * self.d * LOG2PI + self.N * logdet_S + tr)
              - 0.5 * logdet_L.sum() + 0.5 * np.sum(B * Ew))
        return Ew, L_inv, ll


def _speaker_index(eset, speakers):
    if speakers is None:
        speakers = eset.speakers
    speakers = np.asarray(speakers, dtype=object)
    if any(s is None for s in speakers):
        raise ValueError("PLDA estimation needs speaker labels on every embedding")
    _, inv = np.unique(speakers.astype(str), return_inverse=True)
    return inv


def _init_params(stats, rank):
    means = stats.sums / stats.counts[:, None]
    Sb = (means * stats.counts[:, None]).T @ means / stats.N
    w, V = np.linalg.eigh(_sym(Sb))
    top = np.argsort(w)[::-1][:rank]
    Phi = V[:, top] * np.sqrt(np.maximum(w[top], 0.0))
    # deterministic column signs
    Phi *= np.where(Phi[np.argmax(np.abs(Phi), axis=0), np.arange(rank)] < 0, -1.0, 1.0)
    within = stats.scatter - (stats.sums.T / stats.counts) @ stats.sums
    return Phi, _floor_cov(within / stats.N)


def estimate_plda(eset, rank: int, speakers=None, max_iter=EM_MAX_ITER,
                  tol=EM_TOL, vectors=None) -> GenerativePlda:
    """Maximum-likelihood PLDA by EM.

    ``vectors`` overrides ``eset.matrix`` (e.g. preprocessed embeddings), with
    speaker labels still taken from ``eset`` unless ``speakers`` is given.
    The log-likelihood trace is kept on ``model.loglik_history``.
    """
    X = np.atleast_2d(np.asarray(vectors if vectors is not None else eset.matrix,
                                 dtype=float))
    inv = _speaker_index(eset, speakers)
    n_spk = inv.max() + 1
    d = X.shape[1]
    if n_spk < 2:
        raise ValueError("PLDA estimation needs at least 2 speakers")
    if rank < 1 or rank > d:
        raise ValueError(f"rank={rank} must be in [1, {d}]")

    mu = X.mean(axis=0)
    stats = _SpeakerStats(X, inv, mu)
    Phi, Sigma = _init_params(stats, rank)
    history = []
    for it in range(max_iter):
        Ew, L_inv, ll = stats.posteriors(Phi, Sigma)
        history.append(ll)
        if it > 0 and (ll - history[-2]) <= tol * abs(history[-2]):
            break
        R = stats.sums.T @ Ew
        Psi = (stats.counts[:, None, None] * (L_inv + Ew[:, :, None] * Ew[:, None, :])).sum(0)
        Phi = np.linalg.solve(Psi.T, R.T).T
        Sigma = _floor_cov((stats.scatter - Phi @ R.T) / stats.N)
    else:
        history.append(stats.posteriors(Phi, Sigma)[2])
    log.info("PLDA EM: %d iterations, loglik %.6g", len(history), history[-1])
    return GenerativePlda(mu, Phi, Sigma, loglik_history=history)


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_GENDERS = ("male", "female")
SYNTH_SOURCES = ("tel", "vid")


def random_plda(dim: int, rank: int, seed: int, between_scale=1.0,
                within_scale=0.5) -> GenerativePlda:
    """Random PLDA model with a well-conditioned residual covariance."""
    if rank > dim or rank < 1:
        raise ValueError("need 1 <= rank <= dim")
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=dim)
    Phi = rng.normal(scale=between_scale, size=(dim, rank))
    G = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    Sigma = within_scale * (G @ G.T + 0.5 * np.eye(dim))
    return GenerativePlda(mu, Phi, _sym(Sigma))


def sample_synthetic(m: GenerativePlda, n_speakers: int, n_sessions: int, seed: int,
                     prefix="spk") -> EmbeddingSet:
    """Draw ``n_speakers`` x ``n_sessions`` embeddings from the model.

    Gender alternates by speaker and source by session.
    """
    if n_speakers < 1 or n_sessions < 1:
        raise ValueError("n_speakers and n_sessions must be positive")
    rng = np.random.default_rng(seed)
    d, r = m.dim, m.rank
    w = rng.standard_normal((n_speakers, r))
    chol = np.linalg.cholesky(m.Sigma)
    eps = rng.standard_normal((n_speakers, n_sessions, d)) @ chol.T
    X = m.mu + (w @ m.Phi.T)[:, None, :] + eps
    entries = []
    for s in range(n_speakers):
        spk = f"{prefix}{s:04d}"
        for j in range(n_sessions):
            entries.append(Embedding(f"{spk}-s{j:02d}", X[s, j], spk,
                                     SYNTH_GENDERS[s % 2], SYNTH_SOURCES[j % 2]))
    return EmbeddingSet(entries)
