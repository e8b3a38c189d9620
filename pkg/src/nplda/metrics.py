"""Detection metrics (miss/false-alarm rates, detection costs, EER) and
affine score calibration.

Tie convention: a target scoring below the threshold is a miss, a non-target
scoring at or above it is a false alarm.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit

from .losses import BETA1, BETA2

LOG_BETA1 = np.log(BETA1)
LOG_BETA2 = np.log(BETA2)
# target prior halfway (in log-odds) between the two C_primary operating points
CALIBRATION_PRIOR = 1.0 / (1.0 + np.sqrt(BETA1 * BETA2))


class ConvergenceError(RuntimeError):
    pass


def split_scores(scores, targets):
    s = np.asarray(scores, dtype=float).reshape(-1)
    t = np.asarray(targets).reshape(-1).astype(bool)
    if s.shape != t.shape:
        raise ValueError(f"{s.size} scores but {t.size} labels")
    tar, non = s[t], s[~t]
    if tar.size == 0 or non.size == 0:
        raise ValueError("both target and non-target trials are required")
    return tar, non


def _rates(tar_sorted, non_sorted, thresholds):
    thr = np.asarray(thresholds, dtype=float)
    pmiss = np.searchsorted(tar_sorted, thr, side="left") / tar_sorted.size
    pfa = (non_sorted.size - np.searchsorted(non_sorted, thr, side="left")) / non_sorted.size
    return pmiss, pfa


def hard_pmiss_pfa(scores, targets, theta):
    tar, non = split_scores(scores, targets)
    pm, pf = _rates(np.sort(tar), np.sort(non), theta)
    return float(pm), float(pf)


def c_norm(scores, targets, beta, theta) -> float:
    pm, pf = hard_pmiss_pfa(scores, targets, theta)
    return pm + beta * pf


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints between adjacent distinct scores plus both infinities."""
    u = np.unique(np.asarray(scores, dtype=float))
    return np.concatenate([[-np.inf], 0.5 * (u[:-1] + u[1:]), [np.inf]])


def min_c_norm(scores, targets, beta):
    """Exact minimum of ``C_norm`` over thresholds; returns ``(value, theta)``."""
    tar, non = split_scores(scores, targets)
    thr = candidate_thresholds(scores)
    pm, pf = _rates(np.sort(tar), np.sort(non), thr)
    cost = pm + beta * pf
    k = int(np.argmin(cost))
    return float(cost[k]), float(thr[k])


def min_c_primary(scores, targets, beta1=BETA1, beta2=BETA2):
    """Returns ``(value, theta1, theta2)``."""
    c1, th1 = min_c_norm(scores, targets, beta1)
    c2, th2 = min_c_norm(scores, targets, beta2)
    return 0.5 * (c1 + c2), th1, th2


def actual_c_primary(scores, targets, beta1=BETA1, beta2=BETA2) -> float:
    return 0.5 * (c_norm(scores, targets, beta1, np.log(beta1))
                  + c_norm(scores, targets, beta2, np.log(beta2)))


def eer(scores, targets) -> float:
    """Equal error rate by linear interpolation between adjacent ROC points."""
    tar, non = split_scores(scores, targets)
    # operating points ordered by increasing threshold: pmiss rises, pfa falls
    thr = np.concatenate([np.unique(np.concatenate([tar, non])), [np.inf]])
    pm, pf = _rates(np.sort(tar), np.sort(non), thr)
    diff = pm - pf
    k = int(np.argmax(diff >= 0))  # first point with pmiss >= pfa; diff[-1] = 1
    if diff[k] == 0 or k == 0:
        return float(pm[k])
    a, b = diff[k - 1], diff[k]
    w = a / (a - b)
    return float(pm[k - 1] + w * (pm[k] - pm[k - 1]))


# ---------------------------------------------------------------------------
# calibration


def _calibration_objective(a, b, tar, non, prior):
    off = np.log(prior / (1 - prior))
    zt = a * tar + b + off
    zn = a * non + b + off
    return -(prior * np.mean(log_expit(zt)) + (1 - prior) * np.mean(log_expit(-zn)))


def affine_calibrate(scores, targets, prior=CALIBRATION_PRIOR, max_iter=100, tol=1e-10):
    """Fit ``a*s + b`` to be a log-likelihood ratio by prior-weighted logistic
    regression; returns ``(a, b)`` with ``a >= 0``.

    Each class is weighted by ``prior``/``1 - prior`` over its own count, so the
    result does not depend on the target/non-target ratio of the dev set. The
    default prior sits between the two C_primary operating points, where the
    calibrated scores are thresholded at ``log(beta)``.
    """
    tar, non = split_scores(scores, targets)
    off = np.log(prior / (1 - prior))
    # standardise scores for a well-conditioned Newton problem
    mean = np.concatenate([tar, non]).mean()
    scale = np.concatenate([tar, non]).std() or 1.0
    xt, xn = (tar - mean) / scale, (non - mean) / scale
    wt, wn = prior / tar.size, (1 - prior) / non.size
    Xt = np.column_stack([xt, np.ones_like(xt)])
    Xn = np.column_stack([xn, np.ones_like(xn)])

    def obj(v):
        return _calibration_objective(v[0], v[1], xt, xn, prior)

    v = np.array([1.0, 0.0])
    f = obj(v)
    for _ in range(max_iter):
        pt = expit(Xt @ v + off)
        pn = expit(Xn @ v + off)
        grad = wt * Xt.T @ (pt - 1) + wn * Xn.T @ pn
        H = (wt * (Xt.T * (pt * (1 - pt))) @ Xt + wn * (Xn.T * (pn * (1 - pn))) @ Xn)
        step = np.linalg.solve(H + 1e-12 * np.eye(2), grad)
        t = 1.0
        while True:
            cand = v - t * step
            cand[0] = max(cand[0], 0.0)
            fc = obj(cand)
            if fc <= f or t < 1e-10:
                break
            t *= 0.5
        v, f_old, f = cand, f, fc
        if np.max(np.abs(grad)) < tol or abs(f_old - f) < tol * 1e-2:
            break
    else:
        raise ConvergenceError(f"calibration did not converge in {max_iter} iterations")
    a = v[0] / scale
    return float(a), float(v[1] - a * mean)


def apply_calibration(scores, a, b):
    return a * np.asarray(scores, dtype=float) + b


def evaluate(scores, targets) -> dict:
    """All report metrics for a labelled score set."""
    mc, th1, th2 = min_c_primary(scores, targets)
    c1, _ = min_c_norm(scores, targets, BETA1)
    c2, _ = min_c_norm(scores, targets, BETA2)
    tar, non = split_scores(scores, targets)
    return {
        "n_target": int(tar.size),
        "n_nontarget": int(non.size),
        "eer_percent": 100.0 * eer(scores, targets),
        "min_c_primary": mc,
        "act_c_primary": actual_c_primary(scores, targets),
        "min_c_norm_beta1": c1,
        "theta_beta1": th1,
        "min_c_norm_beta2": c2,
        "theta_beta2": th2,
    }
