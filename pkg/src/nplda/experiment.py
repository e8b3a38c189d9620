"""Synthetic end-to-end experiment: generative back-end vs discriminative training.

A raw PLDA population is drawn for training, and a second population with
an inflated residual covariance for development and evaluation. The
frontend (centering + LDA) and the generative PLDA are estimated on the
training speakers; Neural PLDA is then trained from the generative
initialisation with the soft detection cost and, separately, from a
random initialisation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

from .io import EmbeddingSet, Trial, save_model
from .metrics import min_c_primary
from .network import init_from_generative, init_random
from .plda import GenerativePlda, estimate_plda, random_plda, sample_synthetic
from .preprocess import estimate_centering, estimate_lda, make_frontend
from .scoring import score_trials
from .trainer import TrainConfig, sample_training_trials, train


@dataclass
class ExperimentConfig:
    seed: int = 0
    raw_dim: int = 40
    lda_dim: int = 20
    rank: int = 10
    between_scale: float = 0.35
    eval_residual_scale: float = 1.5
    train_speakers: int = 200
    eval_speakers: int = 50
    sessions: int = 8
    n_nontarget: int = 200_000
    generative_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-4, alpha=20.0, theta_init="mindcf"))
    random_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(
        loss="bce", optimizer="adam", lr=0.1))


@dataclass
class SyntheticData:
    train: EmbeddingSet
    dev: EmbeddingSet
    eval: EmbeddingSet
    embeddings: EmbeddingSet  # union of the three
    train_trials: list
    dev_trials: list
    eval_trials: list


def all_pair_trials(eset) -> list:
    """Every unordered pair of distinct embeddings, labelled by speaker."""
    out = []
    for a, b in itertools.combinations(list(eset), 2):
        label = "target" if a.speaker_id == b.speaker_id else "nontarget"
        out.append(Trial(a.id, b.id, label))
    return out


def make_data(cfg: ExperimentConfig) -> SyntheticData:
    s = cfg.seed
    raw = random_plda(cfg.raw_dim, cfg.rank, s, between_scale=cfg.between_scale)
    shifted = GenerativePlda(raw.mu, raw.Phi, raw.Sigma * cfg.eval_residual_scale)
    trn = sample_synthetic(raw, cfg.train_speakers, cfg.sessions, s + 1, prefix="trn")
    dev = sample_synthetic(shifted, cfg.eval_speakers, cfg.sessions, s + 2, prefix="dev")
    evl = sample_synthetic(shifted, cfg.eval_speakers, cfg.sessions, s + 3, prefix="evl")
    n_target = cfg.train_speakers * cfg.sessions * (cfg.sessions - 1) // 2
    trials = sample_training_trials(trn, n_target, cfg.n_nontarget, s)
    return SyntheticData(trn, dev, evl, EmbeddingSet(list(trn) + list(dev) + list(evl)),
                         trials, all_pair_trials(dev), all_pair_trials(evl))


@dataclass
class ExperimentResult:
    baseline_min_c: float
    trained_min_c: float
    random_min_c: float
    models: dict
    histories: dict
    frontend: object
    data: SyntheticData


def _min_c(model, trials, eset, frontend=None):
    s = score_trials(model, trials, eset, frontend)
    return min_c_primary(s.scores, s.targets)[0]


def run_experiment(cfg: ExperimentConfig | None = None, random_init=True) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    data = make_data(cfg)
    X = data.train.matrix
    mean = estimate_centering(X)
    lda = estimate_lda(X - mean, cfg.lda_dim, speakers=data.train.speakers)
    frontend = make_frontend(mean, lda)
    plda = estimate_plda(data.train, cfg.rank, vectors=frontend.transform(X))

    p0 = init_from_generative(mean, lda, plda)
    gen_cfg = replace(cfg.generative_cfg, seed=cfg.seed)
    trained, hist = train(p0, data.train_trials, data.embeddings, data.dev_trials, gen_cfg)
    models = {"generative": plda, "nplda": trained}
    histories = {"nplda": hist}
    random_min_c = float("nan")
    if random_init:
        r0 = init_random(cfg.raw_dim, cfg.lda_dim, cfg.seed, mean=mean)
        rnd_cfg = replace(cfg.random_cfg, seed=cfg.seed)
        rnd, rhist = train(r0, data.train_trials, data.embeddings, data.dev_trials, rnd_cfg)
        models["nplda_random"] = rnd
        histories["nplda_random"] = rhist
        random_min_c = _min_c(rnd, data.eval_trials, data.embeddings)

    return ExperimentResult(
        baseline_min_c=_min_c(plda, data.eval_trials, data.embeddings, frontend),
        trained_min_c=_min_c(trained, data.eval_trials, data.embeddings),
        random_min_c=random_min_c,
        models=models, histories=histories, frontend=frontend, data=data)


def save_result(result: ExperimentResult, out_dir):
    """Write every model file and history TSV under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, model in result.models.items():
        fe = result.frontend if name == "generative" else None
        save_model(out / f"{name}.model", model, fe)
    for name, h in result.histories.items():
        (out / f"{name}.history.tsv").write_text(h.to_tsv())
    return out
