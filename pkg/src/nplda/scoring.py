"""Score trial lists with any back-end model."""

from __future__ import annotations

import numpy as np

from .baselines import DpldaModel, PairwiseGaussian, dplda_expand_batch, gb_score_batch
from .io import ScoreSet
from .network import NeuralPldaParams, forward_batch
from .plda import GenerativePlda, derive_pq, score_pairs

CHUNK = 8192


def _pairs(trials, eset, frontend):
    X = frontend.transform(eset.matrix)
    ei = eset.positions([t.enroll_id for t in trials])
    ti = eset.positions([t.test_id for t in trials])
    return X, ei, ti


def dplda_scores(m: DpldaModel, X, ei, ti) -> np.ndarray:
    out = np.empty(len(ei))
    for k in range(0, len(ei), CHUNK):
        sl = slice(k, k + CHUNK)
        out[sl] = dplda_expand_batch(X[ei[sl]], X[ti[sl]]) @ m.w
    return out


def score_trials(model, trials, eset, frontend=None) -> ScoreSet:
    trials = list(trials)
    if not trials:
        return ScoreSet([], np.zeros(0))
    if isinstance(model, NeuralPldaParams):
        return forward_batch(model, trials, eset)
    if frontend is None:
        raise ValueError(f"{type(model).__name__} scoring needs a frontend")
    X, ei, ti = _pairs(trials, eset, frontend)
    if isinstance(model, GenerativePlda):
        Xc = X - model.mu
        scores = score_pairs(derive_pq(model), Xc[ei], Xc[ti])
    elif isinstance(model, DpldaModel):
        scores = dplda_scores(model, X, ei, ti)
    elif isinstance(model, PairwiseGaussian):
        scores = gb_score_batch(model, X[ei], X[ti])
    else:
        raise TypeError(f"cannot score with {type(model).__name__}")
    return ScoreSet(trials, scores)
