"""Text formats for embeddings, trial lists, score files and models.

Embedding file, one record per line::

    <id>\t<speaker|->\t<gender|->\t<source|->\t<v1> <v2> ... <vD>

Trial file: ``<enroll>\t<test>[\t<target|nontarget>]``.
Score file: ``<enroll>\t<test>\t<score>``.

Model file: a header ``NPLDA-MODEL v1 D=<D> d=<d>`` followed by blocks
``MATRIX <name> <rows> <cols>`` and their rows in row-major order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

GENDERS = ("male", "female", "unknown")
LABELS = ("target", "nontarget")
MODEL_MAGIC = "NPLDA-MODEL"
MODEL_VERSION = "v1"


class FormatError(ValueError):
    """Raised for malformed input files."""

    def __init__(self, msg, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + msg)
        self.path = path
        self.line = line


@dataclass
class Embedding:
    id: str
    vector: np.ndarray
    speaker_id: Optional[str] = None
    gender: Optional[str] = None
    source: Optional[str] = None


class EmbeddingSet:
    """Ordered collection of same-dimension embeddings with an id index."""

    def __init__(self, entries: Iterable[Embedding]):
        self.entries = list(entries)
        if not self.entries:
            raise ValueError("no embeddings")
        self.dim = len(self.entries[0].vector)
        if self.dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        self.index = {}
        for pos, e in enumerate(self.entries):
            if len(e.vector) != self.dim:
                raise ValueError(
                    f"dimension mismatch for {e.id}: {len(e.vector)} != {self.dim}")
            if e.id in self.index:
                raise ValueError(f"duplicate embedding id {e.id}")
            self.index[e.id] = pos
        self._matrix = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.entries[self.index[key]]
        return self.entries[key]

    @property
    def matrix(self) -> np.ndarray:
        """All vectors stacked as an (N, D) array, in input order."""
        if self._matrix is None:
            self._matrix = np.array([e.vector for e in self.entries], dtype=float)
        return self._matrix

    @property
    def speakers(self) -> list:
        return [e.speaker_id for e in self.entries]

    def positions(self, ids) -> np.ndarray:
        try:
            return np.array([self.index[i] for i in ids], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"unresolved embedding id {exc.args[0]}") from None


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: Optional[str] = None

    @property
    def is_target(self) -> bool:
        return self.label == "target"


@dataclass
class ScoreSet:
    trials: list
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if len(self.scores) != len(self.trials):
            raise ValueError(
                f"{len(self.scores)} scores for {len(self.trials)} trials")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def __len__(self):
        return len(self.trials)

    @property
    def targets(self) -> np.ndarray:
        """Labels as a 0/1 array; raises if any trial is unlabeled."""
        return trial_targets(self.trials)


def trial_targets(trials) -> np.ndarray:
    if any(t.label is None for t in trials):
        raise ValueError("trial labels are required")
    return np.array([t.label == "target" for t in trials], dtype=float)


def _meta(tok):
    return None if tok == "-" else tok


def load_embeddings(path) -> EmbeddingSet:
    entries = []
    seen = set()
    dim = None
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise FormatError(f"expected 5 tab-separated columns, got {len(cols)}",
                                  path, lineno)
            eid, spk, gender, source, values = cols
            try:
                vec = np.array([float(v) for v in values.split()], dtype=float)
            except ValueError:
                raise FormatError("non-numeric vector entry", path, lineno) from None
            if vec.size == 0:
                raise FormatError("empty vector", path, lineno)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FormatError(f"dimension mismatch: {vec.size} values, expected {dim}",
                                  path, lineno)
            gender = _meta(gender)
            if gender is not None and gender not in GENDERS:
                raise FormatError(f"unknown gender {gender!r}", path, lineno)
            if eid in seen:
                raise FormatError(f"duplicate id {eid!r}", path, lineno)
            seen.add(eid)
            entries.append(Embedding(eid, vec, _meta(spk), gender, _meta(source)))
    if not entries:
        raise FormatError("no embeddings", path)
    return EmbeddingSet(entries)


def save_embeddings(path, eset: EmbeddingSet):
    with open(path, "w") as f:
        for e in eset:
            vals = " ".join(repr(float(v)) for v in e.vector)
            f.write(f"{e.id}\t{e.speaker_id or '-'}\t{e.gender or '-'}"
                    f"\t{e.source or '-'}\t{vals}\n")


def load_trials(path) -> list:
    trials = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t") if "\t" in line else line.split()
            if len(cols) not in (2, 3):
                raise FormatError(f"expected 2 or 3 columns, got {len(cols)}",
                                  path, lineno)
            label = None
            if len(cols) == 3:
                label = cols[2]
                if label not in LABELS:
                    raise FormatError(f"unknown label {label!r}", path, lineno)
            trials.append(Trial(cols[0], cols[1], label))
    return trials


def save_trials(path, trials):
    with open(path, "w") as f:
        for t in trials:
            tail = f"\t{t.label}" if t.label is not None else ""
            f.write(f"{t.enroll_id}\t{t.test_id}{tail}\n")


def format_score(x: float) -> str:
    # %.9f carries >= 9 significant digits only for |x| >= 0.1
    x = float(x)
    if x == 0.0 or abs(x) >= 0.1:
        return f"{x:.9f}"
    return f"{x:.9e}"


def write_scores(path, s: ScoreSet):
    with open(path, "w") as f:
        for t, x in zip(s.trials, s.scores):
            f.write(f"{t.enroll_id}\t{t.test_id}\t{format_score(x)}\n")


def load_scores(path) -> ScoreSet:
    trials, scores = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise FormatError(f"expected 3 columns, got {len(cols)}", path, lineno)
            try:
                scores.append(float(cols[2]))
            except ValueError:
                raise FormatError(f"bad score {cols[2]!r}", path, lineno) from None
            trials.append(Trial(cols[0], cols[1]))
    return ScoreSet(trials, np.array(scores))


def attach_labels(s: ScoreSet, trials) -> ScoreSet:
    """Return ``s`` with labels taken from a keyed trial list."""
    key = {(t.enroll_id, t.test_id): t.label for t in trials}
    out = []
    for t in s.trials:
        try:
            out.append(Trial(t.enroll_id, t.test_id, key[(t.enroll_id, t.test_id)]))
        except KeyError:
            raise KeyError(f"no key for trial {t.enroll_id} {t.test_id}") from None
    return ScoreSet(out, s.scores.copy())


# ---------------------------------------------------------------------------
# model files

# Blocks expected for each model kind; shapes use D (raw dim), d (processed dim)
# and free symbols that must agree across blocks.
MODEL_LAYOUTS = {
    "nplda": {"W1": ("d", "D"), "b1": ("d", 1), "W2": ("d", "d"), "b2": ("d", 1),
              "P": ("d", "d"), "Q": ("d", "d"), "theta": (1, 2)},
    "generative": {"W1": ("d", "D"), "b1": ("d", 1), "mu": ("d", 1),
                   "Phi": ("d", "r"), "Sigma": ("d", "d")},
    "dplda": {"W1": ("d", "D"), "b1": ("d", 1), "w": ("M", 1)},
    "gb": {"W1": ("d", "D"), "b1": ("d", 1), "mu_t": ("2d", 1), "mu_nt": ("2d", 1),
           "Sigma_t": ("2d", "2d"), "Sigma_nt": ("2d", "2d")},
}


def _kind_of(names):
    names = set(names)
    for kind, layout in MODEL_LAYOUTS.items():
        if names == set(layout):
            return kind
    raise FormatError(f"unrecognized block set {sorted(names)}")


def _check_layout(kind, blocks, D, d, path=None):
    sym = {"D": D, "d": d, "2d": 2 * d, "M": 2 * d * d + d + 1}
    for name, (rs, cs) in MODEL_LAYOUTS[kind].items():
        got = blocks[name].shape
        for want, have in zip((rs, cs), got):
            if isinstance(want, int):
                ok = want == have
            elif want in sym:
                ok = sym[want] == have
            else:
                ok = sym.setdefault(want, have) == have
            if not ok:
                raise FormatError(
                    f"dimension disagreement in block {name}: shape {got} "
                    f"inconsistent with D={D}, d={d}", path)


def write_model_blocks(path, blocks: dict, D: int, d: int):
    """Write named 2-D arrays under a versioned header."""
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION} D={D} d={d}"]
    for name, arr in blocks.items():
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        lines.append(f"MATRIX {name} {arr.shape[0]} {arr.shape[1]}")
        for row in arr:
            lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_model_blocks(path):
    """Parse a model file into ``(kind, blocks, D, d)`` with full validation."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or not lines[0].startswith(MODEL_MAGIC):
        raise FormatError("missing model header", path, 1)
    head = lines[0].split()
    if len(head) != 4 or not head[2].startswith("D=") or not head[3].startswith("d="):
        raise FormatError(f"bad header {lines[0]!r}", path, 1)
    if head[1] != MODEL_VERSION:
        raise FormatError(f"unsupported model version {head[1]!r} "
                          f"(expected {MODEL_VERSION})", path, 1)
    try:
        D, d = int(head[2][2:]), int(head[3][2:])
    except ValueError:
        raise FormatError(f"bad header dimensions {lines[0]!r}", path, 1) from None
    blocks = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        tok = lines[i].split()
        if len(tok) != 4 or tok[0] != "MATRIX":
            raise FormatError(f"expected MATRIX block, got {lines[i]!r}", path, i + 1)
        try:
            name, rows, cols = tok[1], int(tok[2]), int(tok[3])
        except ValueError:
            raise FormatError(f"bad block shape in {lines[i]!r}", path, i + 1) from None
        if i + rows > len(lines) - 1:
            raise FormatError(f"truncated block {name}", path, i + 1)
        data = []
        for k in range(rows):
            j = i + 1 + k
            vals = lines[j].split()
            if len(vals) != cols:
                raise FormatError(f"block {name} row {k}: {len(vals)} values, "
                                  f"expected {cols}", path, j + 1)
            data.append([float(v) for v in vals])
        blocks[name] = np.array(data, dtype=float).reshape(rows, cols)
        i += rows + 1
    kind = _kind_of(blocks)
    _check_layout(kind, blocks, D, d, path)
    return kind, blocks, D, d


def save_model(path, model, frontend=None):
    """Persist any back-end model.

    ``NeuralPldaParams`` carries its own input layers; the other kinds need the
    ``frontend`` (centering + LDA affine map) they were estimated in.
    """
    from .baselines import DpldaModel, PairwiseGaussian
    from .network import NeuralPldaParams
    from .plda import GenerativePlda

    if isinstance(model, NeuralPldaParams):
        blocks = {"W1": model.W1, "b1": model.b1[:, None], "W2": model.W2,
                  "b2": model.b2[:, None], "P": model.P, "Q": model.Q,
                  "theta": model.theta[None, :]}
        D, d = model.W1.shape[1], model.W1.shape[0]
    else:
        if frontend is None:
            raise ValueError(f"{type(model).__name__} needs a frontend to be saved")
        blocks = {"W1": frontend.weight, "b1": frontend.bias[:, None]}
        if isinstance(model, GenerativePlda):
            blocks.update(mu=model.mu[:, None], Phi=model.Phi, Sigma=model.Sigma)
        elif isinstance(model, DpldaModel):
            blocks.update(w=model.w[:, None])
        elif isinstance(model, PairwiseGaussian):
            blocks.update(mu_t=model.mu_t[:, None], mu_nt=model.mu_nt[:, None],
                          Sigma_t=model.Sigma_t, Sigma_nt=model.Sigma_nt)
        else:
            raise TypeError(f"cannot save {type(model).__name__}")
        D, d = frontend.weight.shape[1], frontend.weight.shape[0]
    _check_layout(_kind_of(blocks), {k: np.atleast_2d(v) for k, v in blocks.items()}, D, d)
    write_model_blocks(path, blocks, D, d)


def load_model(path):
    """Load a model file; returns ``(model, frontend)``.

    ``frontend`` is ``None`` for Neural PLDA files.
    """
    from .baselines import DpldaModel, PairwiseGaussian
    from .network import NeuralPldaParams
    from .plda import GenerativePlda
    from .preprocess import Frontend

    kind, b, D, d = read_model_blocks(path)
    if kind == "nplda":
        return NeuralPldaParams(W1=b["W1"], b1=b["b1"][:, 0], W2=b["W2"], b2=b["b2"][:, 0],
                                P=b["P"], Q=b["Q"], theta=b["theta"][0]), None
    frontend = Frontend(b["W1"], b["b1"][:, 0])
    if kind == "generative":
        model = GenerativePlda(b["mu"][:, 0], b["Phi"], b["Sigma"])
    elif kind == "dplda":
        model = DpldaModel(b["w"][:, 0])
    else:
        model = PairwiseGaussian(b["mu_t"][:, 0], b["mu_nt"][:, 0],
                                 b["Sigma_t"], b["Sigma_nt"])
    return model, frontend


def ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
