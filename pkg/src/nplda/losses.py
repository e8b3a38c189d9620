"""Training objectives with analytic gradients w.r.t. scores and thresholds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

BETA1 = 99.0
BETA2 = 199.0


@dataclass
class SoftCostConfig:
    alpha: float = 20.0
    beta1: float = BETA1
    beta2: float = BETA2
    lambda_reg: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("betas must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be nonnegative")


def _as_arrays(scores, targets):
    s = np.asarray(scores, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if s.shape != t.shape:
        raise ValueError(f"{s.size} scores but {t.size} targets")
    if s.size == 0:
        raise ValueError("empty input")
    return s, t


def bce_loss(scores, targets):
    """Mean negative log-likelihood of ``sigmoid(s)``; returns ``(loss, dL/ds)``."""
    s, t = _as_arrays(scores, targets)
    n = s.size
    loss = -np.sum(t * log_expit(s) + (1 - t) * log_expit(-s)) / n
    return float(loss), (expit(s) - t) / n


def bce_regularized(scores, targets, plda_scores, lam):
    s, t = _as_arrays(scores, targets)
    ref = np.asarray(plda_scores, dtype=float).reshape(-1)
    if ref.shape != s.shape:
        raise ValueError(f"{ref.size} reference scores for {s.size} trials")
    loss, grad = bce_loss(s, t)
    diff = s - ref
    n = s.size
    return loss + lam * float(diff @ diff) / n, grad + 2.0 * lam * diff / n


def _class_counts(t, need_tar=True, need_non=True):
    n_tar = t.sum()
    n_non = t.size - n_tar
    if need_tar and n_tar == 0:
        raise ValueError("no target trials")
    if need_non and n_non == 0:
        raise ValueError("no non-target trials")
    return n_tar, n_non


def soft_pmiss(scores, targets, theta, alpha) -> float:
    s, t = _as_arrays(scores, targets)
    n_tar, _ = _class_counts(t, need_non=False)
    return float(np.sum(t * expit(-alpha * (s - theta))) / n_tar)


def soft_pfa(scores, targets, theta, alpha) -> float:
    s, t = _as_arrays(scores, targets)
    _, n_non = _class_counts(t, need_tar=False)
    return float(np.sum((1 - t) * expit(alpha * (s - theta))) / n_non)


def soft_cnorm(scores, targets, beta, theta, alpha) -> float:
    return soft_pmiss(scores, targets, theta, alpha) + beta * soft_pfa(scores, targets, theta, alpha)


def _soft_cnorm_grad(s, t, n_tar, n_non, beta, theta, alpha):
    """Soft C_norm and its derivatives w.r.t. scores and theta."""
    sig = expit(alpha * (s - theta))
    pmiss = np.sum(t * (1 - sig)) / n_tar
    pfa = np.sum((1 - t) * sig) / n_non
    dsig = alpha * sig * (1 - sig)  # d sigma / d s
    ds = (-t / n_tar + beta * (1 - t) / n_non) * dsig
    return pmiss + beta * pfa, ds, -ds.sum()


def soft_cprimary(scores, targets, theta, cfg: SoftCostConfig):
    """Mean of the two soft detection costs; returns ``(loss, dL/ds, dL/dtheta)``."""
    s, t = _as_arrays(scores, targets)
    n_tar, n_non = _class_counts(t)
    theta = np.asarray(theta, dtype=float)
    c1, ds1, dth1 = _soft_cnorm_grad(s, t, n_tar, n_non, cfg.beta1, theta[0], cfg.alpha)
    c2, ds2, dth2 = _soft_cnorm_grad(s, t, n_tar, n_non, cfg.beta2, theta[1], cfg.alpha)
    return 0.5 * (c1 + c2), 0.5 * (ds1 + ds2), 0.5 * np.array([dth1, dth2])


def soft_plus_bce(scores, targets, theta, cfg: SoftCostConfig, bce_weight=0.1):
    """Soft C_primary plus a weighted BCE term."""
    loss, ds, dth = soft_cprimary(scores, targets, theta, cfg)
    bl, bg = bce_loss(scores, targets)
    return loss + bce_weight * bl, ds + bce_weight * bg, dth


LOSSES = ("bce", "bce_reg", "soft_cprimary", "soft_plus_bce")


def evaluate_loss(name, scores, targets, theta, cfg: SoftCostConfig, bce_weight=0.1,
                  ref_scores=None):
    """Dispatch by loss name; always returns ``(loss, dL/ds, dL/dtheta)``."""
    zero = np.zeros(2)
    if name == "bce":
        loss, ds = bce_loss(scores, targets)
        return loss, ds, zero
    if name == "bce_reg":
        if ref_scores is None:
            raise ValueError("bce_reg needs reference PLDA scores")
        loss, ds = bce_regularized(scores, targets, ref_scores, cfg.lambda_reg)
        return loss, ds, zero
    if name == "soft_cprimary":
        return soft_cprimary(scores, targets, theta, cfg)
    if name == "soft_plus_bce":
        return soft_plus_bce(scores, targets, theta, cfg, bce_weight)
    raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSSES)}")
