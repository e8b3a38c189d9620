"""Trial sampling and minibatch training for the discriminative back-ends."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import DpldaModel, dplda_expand_batch
from .io import Trial, trial_targets
from .losses import LOSSES, SoftCostConfig, evaluate_loss
from .metrics import min_c_primary
from .network import LOG_BETAS, NeuralPldaParams, backward, forward_indexed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 4096
    lr: float = 1e-3
    max_epochs: int = 30
    seed: int = 0
    loss: str = "soft_cprimary"
    alpha: float = 20.0
    lambda_reg: float = 0.0
    bce_mix_weight: float = 0.1
    momentum: float = 0.9
    min_lr: float = 1e-6
    optimizer: str = "sgd"
    theta_init: str = "model"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {', '.join(LOSSES)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.theta_init not in THETA_INITS:
            raise ValueError(f"unknown theta_init {self.theta_init!r}")

    @property
    def cost(self):
        return SoftCostConfig(alpha=self.alpha, lambda_reg=self.lambda_reg)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    val_min_c_primary: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def to_tsv(self) -> str:
        rows = ["epoch\ttrain_loss\tval_loss\tlr\tval_min_c_primary"]
        for k in range(len(self)):
            rows.append(f"{k + 1}\t{self.train_loss[k]!r}\t{self.val_loss[k]!r}"
                        f"\t{self.lr[k]!r}\t{self.val_min_c_primary[k]!r}")
        return "\n".join(rows) + "\n"


class _Momentum:
    def __init__(self, state, momentum):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in state.items()}

    def step(self, state, grads, lr):
        for k, g in grads.items():
            self.velocity[k] = self.momentum * self.velocity[k] - lr * g
            state[k] = state[k] + self.velocity[k]


class _Adam:
    b1, b2, eps = 0.9, 0.999, 1e-8

    def __init__(self, state, momentum=None):
        self.m = {k: np.zeros_like(v) for k, v in state.items()}
        self.v = {k: np.zeros_like(v) for k, v in state.items()}
        self.t = 0

    def step(self, state, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            state[k] = state[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


OPTIMIZERS = {"sgd": _Momentum, "adam": _Adam}
# "model": keep the thresholds carried by the model (log-beta for fresh inits);
# "mindcf": restart them at the hard min-cost thresholds of the initial scores
THETA_INITS = ("model", "mindcf")


class HalvingSchedule:
    """Halve the learning rate whenever validation loss rises twice in a row."""

    def __init__(self, lr):
        self.lr = lr
        self.n_halvings = 0
        self._prev = None
        self._rises = 0

    def step(self, val_loss):
        if self._prev is not None and val_loss > self._prev:
            self._rises += 1
        else:
            self._rises = 0
        self._prev = val_loss
        if self._rises == 2:
            self.lr /= 2.0
            self.n_halvings += 1
            self._rises = 0
        return self.lr


# ---------------------------------------------------------------------------
# trial sampling


def _group_key(e):
    return (e.gender, e.source)


def sample_training_trials(eset, n_target, n_nontarget, seed) -> list:
    """Random target pairs within speaker and non-target pairs across speakers
    matched by gender and source.

    Pairs are drawn without replacement from all unordered pairs of distinct
    embeddings. Missing gender/source metadata counts as its own category.
    """
    spk = eset.speakers
    if any(s is None for s in spk):
        raise ValueError("trial sampling needs speaker labels")
    if len(set(spk)) < 2:
        raise ValueError("trial sampling needs at least 2 speakers")
    rng = np.random.default_rng(seed)

    by_spk = defaultdict(list)
    by_group = defaultdict(list)
    for pos, e in enumerate(eset):
        by_spk[e.speaker_id].append(pos)
        by_group[_group_key(e)].append(pos)

    tar_pairs = []
    for members in by_spk.values():
        m = np.array(members)
        i, j = np.triu_indices(len(m), k=1)
        tar_pairs.append(np.column_stack([m[i], m[j]]))
    tar_pairs = np.concatenate(tar_pairs)

    spk_arr = np.array(spk, dtype=object)
    non_pairs = []
    for members in by_group.values():
        m = np.array(members)
        i, j = np.triu_indices(len(m), k=1)
        keep = spk_arr[m[i]] != spk_arr[m[j]]
        non_pairs.append(np.column_stack([m[i][keep], m[j][keep]]))
    non_pairs = np.concatenate(non_pairs)

    if n_target > len(tar_pairs):
        raise ValueError(f"requested {n_target} target trials but only "
                         f"{len(tar_pairs)} same-speaker pairs exist")
    if n_nontarget > len(non_pairs):
        raise ValueError(f"requested {n_nontarget} non-target trials but only "
                         f"{len(non_pairs)} matched cross-speaker pairs exist")
    tar = tar_pairs[rng.choice(len(tar_pairs), n_target, replace=False)]
    non = non_pairs[rng.choice(len(non_pairs), n_nontarget, replace=False)]
    ids = [e.id for e in eset]
    trials = ([Trial(ids[a], ids[b], "target") for a, b in tar]
              + [Trial(ids[a], ids[b], "nontarget") for a, b in non])
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


# ---------------------------------------------------------------------------
# back-end adapters: a flat dict of trainable arrays plus score/grad hooks


class _NpldaAdapter:
    def __init__(self, params: NeuralPldaParams, eset):
        self.model = params.copy()
        self.X = eset.matrix
        self.state = dict(self.model.items())

    def sync(self):
        for name, arr in self.state.items():
            setattr(self.model, name, arr)
        self.model.symmetrize()
        self.state = dict(self.model.items())

    @property
    def theta(self):
        return self.state["theta"]

    def scores(self, ei, ti):
        return forward_indexed(self.model, self.X, ei, ti)

    def grads(self, cache, ds, dtheta):
        g = backward(self.model, cache, ds)
        g.theta = np.asarray(dtheta, dtype=float)
        return dict(g.items())


class _DpldaAdapter:
    def __init__(self, model: DpldaModel, eset, frontend):
        if frontend is None:
            raise ValueError("DPLDA training needs a frontend")
        self.model = model.copy()
        self.X = frontend.transform(eset.matrix)
        # thresholds are trained alongside w but not persisted with the model
        self.state = {"w": self.model.w, "theta": LOG_BETAS.copy()}

    def sync(self):
        self.model.w = self.state["w"]

    @property
    def theta(self):
        return self.state["theta"]

    def scores(self, ei, ti):
        phi = dplda_expand_batch(self.X[ei], self.X[ti])
        return phi @ self.state["w"], phi

    def grads(self, phi, ds, dtheta):
        return {"w": phi.T @ ds, "theta": np.asarray(dtheta, dtype=float)}


def _adapter(model, eset, frontend):
    if isinstance(model, NeuralPldaParams):
        return _NpldaAdapter(model, eset)
    if isinstance(model, DpldaModel):
        return _DpldaAdapter(model, eset, frontend)
    raise TypeError(f"cannot train {type(model).__name__}")


def _trial_index(trials, eset):
    ei = eset.positions([t.enroll_id for t in trials])
    ti = eset.positions([t.test_id for t in trials])
    return ei, ti


def _stratified_batches(rng, targets, batch_size):
    tar = np.flatnonzero(targets == 1)
    non = np.flatnonzero(targets == 0)
    if tar.size == 0 or non.size == 0:
        raise ValueError("training trials must contain both targets and non-targets")
    n_batches = max(1, min(math.ceil(targets.size / batch_size), tar.size, non.size))
    tar_chunks = np.array_split(rng.permutation(tar), n_batches)
    non_chunks = np.array_split(rng.permutation(non), n_batches)
    return [np.concatenate([a, b]) for a, b in zip(tar_chunks, non_chunks)]


def mindcf_thresholds(scores, targets):
    """Finite argmin thresholds of the two hard detection costs."""
    _, th1, th2 = min_c_primary(scores, targets)
    lo, hi = scores.min() - 1.0, scores.max() + 1.0
    return np.clip([th1, th2], lo, hi)


def _loss(cfg, scores, targets, theta, ref):
    return evaluate_loss(cfg.loss, scores, targets, theta, cfg.cost,
                         bce_weight=cfg.bce_mix_weight, ref_scores=ref)


def validate(params, val_trials, eset, cfg: TrainConfig, frontend=None, theta=None,
             ref_scores=None):
    """Configured loss and min C_primary on labelled trials; returns ``(loss, minc)``."""
    if not val_trials:
        raise ValueError("empty validation trial list")
    adapter = _adapter(params, eset, frontend)
    if theta is not None:
        adapter.state["theta"] = np.asarray(theta, dtype=float)
    ei, ti = _trial_index(val_trials, eset)
    scores, _ = adapter.scores(ei, ti)
    targets = trial_targets(val_trials)
    loss, _, _ = _loss(cfg, scores, targets, adapter.theta, ref_scores)
    return loss, min_c_primary(scores, targets)[0]


def train(params, trials, eset, val_trials, cfg: TrainConfig, frontend=None,
          ref_scores=None, val_ref_scores=None, on_epoch=None):
    """Minibatch gradient descent with momentum and validation-driven LR halving.

    ``ref_scores`` (aligned with ``trials``) are needed by the ``bce_reg``
    loss. ``on_epoch(epoch, model, history)`` is called after every epoch.
    Returns ``(model, history)``; the input model is never mutated.
    """
    adapter = _adapter(params, eset, frontend)
    history = TrainHistory()
    if cfg.max_epochs <= 0:
        return adapter.model, history

    targets = trial_targets(trials)
    ei, ti = _trial_index(trials, eset)
    vei, vti = _trial_index(val_trials, eset)
    vtargets = trial_targets(val_trials)
    ref = None if ref_scores is None else np.asarray(ref_scores, dtype=float)
    vref = None if val_ref_scores is None else np.asarray(val_ref_scores, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    if cfg.theta_init == "mindcf":
        adapter.state["theta"] = mindcf_thresholds(adapter.scores(ei, ti)[0], targets)
        adapter.sync()
    opt = OPTIMIZERS[cfg.optimizer](adapter.state, cfg.momentum)
    schedule = HalvingSchedule(cfg.lr)

    for epoch in range(cfg.max_epochs):
        lr = schedule.lr
        if lr < cfg.min_lr:
            break
        batch_losses = []
        for b in _stratified_batches(rng, targets, cfg.batch_size):
            scores, cache = adapter.scores(ei[b], ti[b])
            loss, ds, dth = _loss(cfg, scores, targets[b], adapter.theta,
                                  None if ref is None else ref[b])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch + 1}; "
                    f"score range [{scores.min():.3g}, {scores.max():.3g}]")
            grads = adapter.grads(cache, ds, dth)
            opt.step(adapter.state, grads, lr)
            adapter.sync()
            batch_losses.append(loss)

        vscores, _ = adapter.scores(vei, vti)
        vloss, _, _ = _loss(cfg, vscores, vtargets, adapter.theta, vref)
        if not np.isfinite(vloss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch + 1}")
        history.train_loss.append(float(np.mean(batch_losses)))
        history.val_loss.append(float(vloss))
        history.lr.append(lr)
        history.val_min_c_primary.append(min_c_primary(vscores, vtargets)[0])
        log.info("epoch %d: train %.5f val %.5f minC %.4f lr %.3g", epoch + 1,
                 history.train_loss[-1], vloss, history.val_min_c_primary[-1], lr)
        schedule.step(vloss)
        if on_epoch is not None:
            on_epoch(epoch + 1, adapter.model, history)
    return adapter.model, history
