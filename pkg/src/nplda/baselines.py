"""Discriminative PLDA and the pairwise Gaussian back-end.

Both operate in the processed space of a :class:`~nplda.preprocess.Frontend`
(centering, LDA, length normalisation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .io import trial_targets
from .plda import ScoreMatrices

GB_RIDGE = 1e-4
GB_MAX_COND = 1e10


@dataclass
class DpldaModel:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.array(self.w, dtype=float).reshape(-1)
        d = expansion_dim(len(self.w))
        if 2 * d * d + d + 1 != len(self.w):
            raise ValueError(f"weight length {len(self.w)} is not 2d^2+d+1")

    @property
    def dim(self):
        return expansion_dim(len(self.w))

    def copy(self):
        return DpldaModel(self.w.copy())

    def items(self):
        return [("w", self.w)]


def expansion_dim(M: int) -> int:
    """Invert ``M = 2d^2 + d + 1``."""
    return int(round((-1 + np.sqrt(1 + 8 * (M - 1))) / 4))


def dplda_expand(e, t) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    t = np.asarray(t, dtype=float)
    if e.shape != t.shape or e.ndim != 1:
        raise ValueError(f"dimension mismatch: {e.shape} vs {t.shape}")
    return dplda_expand_batch(e[None], t[None])[0]


def dplda_expand_batch(E, T) -> np.ndarray:
    """Quadratic pair expansion for (N, d) arrays, row-major ``vec``."""
    E = np.atleast_2d(E)
    T = np.atleast_2d(T)
    if E.shape != T.shape:
        raise ValueError(f"dimension mismatch: {E.shape} vs {T.shape}")
    n, d = E.shape
    et = E[:, :, None] * T[:, None, :]
    cross = (et + et.transpose(0, 2, 1)).reshape(n, d * d)
    auto = (E[:, :, None] * E[:, None, :] + T[:, :, None] * T[:, None, :]).reshape(n, d * d)
    return np.hstack([cross, auto, E + T, np.ones((n, 1))])


def dplda_init_from_plda(pq: ScoreMatrices, mu=None) -> DpldaModel:
    """Weights reproducing the generative score.

    Without ``mu`` the inputs are taken as already centered. With the PLDA
    mean given, the centering is folded into the linear and constant slots.
    """
    d = pq.P.shape[0]
    lin, const = np.zeros(d), 0.0
    if mu is not None:
        mu = np.asarray(mu, dtype=float)
        A = pq.P + pq.Q
        lin = -2.0 * A @ mu
        const = 2.0 * mu @ A @ mu
    return DpldaModel(np.concatenate([pq.P.ravel(), pq.Q.ravel(), lin, [const]]))


def dplda_score(m: DpldaModel, phi) -> float:
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != m.w.shape[0]:
        raise ValueError(f"expansion length {phi.shape[-1]} != weight length {m.w.shape[0]}")
    return phi @ m.w


def dplda_train(trials, eset, frontend, cfg, val_trials=None, init=None):
    """Train DPLDA weights with the shared trainer.

    ``init`` defaults to all-zero weights; pass :func:`dplda_init_from_plda`
    output to start from the generative model.
    """
    from .trainer import train

    targets = trial_targets(trials)
    if targets.min() == targets.max():
        raise ValueError("DPLDA training needs both target and non-target trials")
    d = frontend.out_dim
    model = init.copy() if init is not None else DpldaModel(np.zeros(2 * d * d + d + 1))
    return train(model, trials, eset, val_trials or trials, cfg, frontend=frontend)


# ---------------------------------------------------------------------------
# pairwise Gaussian back-end


@dataclass
class PairwiseGaussian:
    mu_t: np.ndarray
    mu_nt: np.ndarray
    Sigma_t: np.ndarray
    Sigma_nt: np.ndarray


def _ridge(S, n):
    dim = S.shape[0]
    tr = np.trace(S)
    lam = GB_RIDGE * (tr / dim if tr > 0 else 1.0)
    if n < dim or np.linalg.cond(S) > GB_MAX_COND:
        S = S + lam * np.eye(dim)
    return S


def _stacked(trials, X, index):
    ei = np.array([index[t.enroll_id] for t in trials], dtype=np.intp)
    ti = np.array([index[t.test_id] for t in trials], dtype=np.intp)
    return np.hstack([X[ei], X[ti]])


def gb_estimate(trials, eset, frontend) -> PairwiseGaussian:
    """Class-wise ML mean and covariance of stacked processed pairs."""
    targets = trial_targets(trials).astype(bool)
    if targets.all() or not targets.any():
        raise ValueError("pairwise Gaussian needs both target and non-target trials")
    X = frontend.transform(eset.matrix)
    Z = _stacked(trials, X, eset.index)
    params = []
    for mask in (targets, ~targets):
        Zc = Z[mask]
        mu = Zc.mean(axis=0)
        S = (Zc - mu).T @ (Zc - mu) / Zc.shape[0]
        params.append((mu, _ridge(0.5 * (S + S.T), Zc.shape[0])))
    (mu_t, S_t), (mu_nt, S_nt) = params
    return PairwiseGaussian(mu_t, mu_nt, S_t, S_nt)


def gb_score_batch(g: PairwiseGaussian, E, T) -> np.ndarray:
    """Gaussian log-likelihood ratio of stacked pairs, target over non-target."""
    Z = np.hstack([np.atleast_2d(E), np.atleast_2d(T)])
    if Z.shape[1] != g.mu_t.shape[0]:
        raise ValueError(f"pair dim {Z.shape[1]} != model dim {g.mu_t.shape[0]}")
    out = np.zeros(Z.shape[0])
    for sign, mu, S in ((1.0, g.mu_t, g.Sigma_t), (-1.0, g.mu_nt, g.Sigma_nt)):
        try:
            cf = cho_factor(S, lower=True)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("singular pairwise Gaussian covariance") from None
        R = Z - mu
        maha = np.einsum("ij,ji->i", R, cho_solve(cf, R.T))
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        out += sign * -0.5 * (maha + logdet)
    return out


def gb_score(g: PairwiseGaussian, e, t) -> float:
    return float(gb_score_batch(g, e, t)[0])
