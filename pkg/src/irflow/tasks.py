"""Downstream use of a pre-trained encoder: embeddings, retrieval metric, classification."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graph import FlowGraph
from .model import encoder_params, forward_batch, prepare_program
from .pretrain import PretrainState

log = logging.getLogger(__name__)


class DegenerateClass(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


# --------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingCorpus:
    ids: list[str]
    labels: list
    vectors: np.ndarray  # (N, d)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float).reshape(len(self.ids), -1)
        if len(self.labels) != len(self.ids):
            raise ValueError("ids and labels differ in length")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i, y, v in zip(self.ids, self.labels, self.vectors):
                fh.write(json.dumps({"id": i, "label": y, "v": v.tolist()}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "EmbeddingCorpus":
        ids, labels, vs = [], [], []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                row = json.loads(line)
                ids.append(row["id"])
                labels.append(row["label"])
                vs.append(row["v"])
        return cls(ids, labels, np.asarray(vs, dtype=float).reshape(len(ids), -1))


def _prepare_all(graphs, state: PretrainState, unknown: str):
    return [prepare_program(g, state.tokenizer, state.model_config, state.vocab, unknown)
            for g in graphs]


def embed_graphs(graphs: list[FlowGraph], state: PretrainState, batch_size: int = 16,
                 unknown: str = "drop") -> np.ndarray:
    """Program vectors ``v`` (N, d); raises ConfigMismatch for graphs beyond the model limits."""
    progs = _prepare_all(graphs, state, unknown)
    params = encoder_params(state.params)
    out = [forward_batch(progs[i : i + batch_size], params, state.model_config).v.data
           for i in range(0, len(progs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, state.model_config.d))


def embed_corpus(graphs: list[FlowGraph], state: PretrainState, ids=None, labels=None,
                 batch_size: int = 16) -> EmbeddingCorpus:
    ids = [str(i) for i in range(len(graphs))] if ids is None else list(ids)
    labels = [None] * len(graphs) if labels is None else list(labels)
    return EmbeddingCorpus(ids, labels, embed_graphs(graphs, state, batch_size))


# --------------------------------------------------------------------------
# retrieval


def cosine_similarity(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    U = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    # identical rows must tie exactly; BLAS blocking can split them by an ulp
    uniq, inv = np.unique(U, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    return (uniq @ uniq.T)[np.ix_(inv, inv)]


def average_precision_at_r(relevant: np.ndarray, R: int) -> Fraction:
    """(1/R) * sum over k <= R of precision@k at each relevant rank k."""
    hits, total = 0, Fraction(0)
    for k, rel in enumerate(relevant[:R], start=1):
        if rel:
            hits += 1
            total += Fraction(hits, k)
    return total / R


def map_at_r(vectors, labels, R: int | None = None, exact: bool = False):
    """Mean average precision at R over every program used as a query.

    Candidates are all other programs ranked by cosine similarity (ties
    broken by index).  ``R=None`` uses each query's class size minus one.
    Returns a float, or a :class:`Fraction` when ``exact``.
    """
    if isinstance(vectors, EmbeddingCorpus):
        vectors, labels = vectors.vectors, vectors.labels
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise DegenerateClass("empty corpus")
    if R is not None and R < 1:
        raise ValueError("R must be at least 1")
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if counts.min() < 2:
        bad = labels[counts[inverse] < 2][0]
        raise DegenerateClass(f"class {bad!r} has no other member to retrieve")
    S = cosine_similarity(vectors)
    scores = []
    for q in range(n):
        others = np.delete(np.arange(n), q)
        order = others[np.argsort(-S[q, others], kind="stable")]
        r_q = counts[inverse[q]] - 1 if R is None else R
        scores.append(average_precision_at_r(labels[order] == labels[q], r_q))
    mean = sum(scores, Fraction(0)) / n
    return mean if exact else float(mean)


# --------------------------------------------------------------------------
# classification


@dataclass
class ClassifierResult:
    params: dict[str, Tensor]
    num_classes: int
    n_aux: int = 0
    error_rate: float | None = None
    history: list[float] = field(default_factory=list)


def init_head(d: int, num_classes: int, n_aux: int = 0) -> dict[str, Tensor]:
    return {"clf.w": ad.parameter(np.zeros((d + n_aux, num_classes)), "clf.w"),
            "clf.b": ad.parameter(np.zeros(num_classes), "clf.b")}


def _logits(progs, params, state: PretrainState, aux=None) -> Tensor:
    v = forward_batch(progs, params, state.model_config).v
    if aux is not None:
        v = ad.concat([v, Tensor(np.asarray(aux, dtype=float))], axis=1)
    return ad.matmul(v, params["clf.w"]) + params["clf.b"]


def _check_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    return y


def predict_classes(graphs, state: PretrainState, result: ClassifierResult, aux=None,
                    batch_size: int = 16) -> np.ndarray:
    progs = _prepare_all(graphs, state, "drop")
    out = []
    for i in range(0, len(progs), batch_size):
        a = None if aux is None else np.asarray(aux)[i : i + batch_size]
        out.append(np.argmax(_logits(progs[i : i + batch_size], result.params, state, a).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def error_rate(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred != labels)) if labels.size else float("nan")


def finetune_classifier(train_graphs, train_labels, state: PretrainState, num_classes: int,
                        valid_graphs=None, valid_labels=None, steps: int = 100,
                        lr: float = 1e-3, batch_size: int = 8, seed: int = 0,
                        weight_decay: float = 0.0, train_aux=None, valid_aux=None) -> ClassifierResult:
    """Cross-entropy fine-tuning of the encoder plus a zero-initialized linear head.

    Pre-training heads are discarded.  ``*_aux`` are optional extra scalar
    features appended to ``v`` before the head.  The error rate is reported
    on the validation set when given, else on the training set.
    """
    y = _check_labels(train_labels, num_classes)
    n_aux = 0 if train_aux is None else np.asarray(train_aux).shape[1]
    params = {k: ad.parameter(p.data.copy(), k) for k, p in encoder_params(state.params).items()}
    params.update(init_head(state.model_config.d, num_classes, n_aux))
    progs = _prepare_all(train_graphs, state, "drop")
    opt = ad.AdamW(lr, weight_decay=weight_decay)
    result = ClassifierResult(params, num_classes, n_aux)
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        idx = rng.choice(len(progs), size=min(batch_size, len(progs)), replace=False)
        for p in params.values():
            p.grad = None
        aux = None if train_aux is None else np.asarray(train_aux)[idx]
        with Tape() as tape:
            loss = ad.cross_entropy(_logits([progs[i] for i in idx], params, state, aux), y[idx])
        tape.backward(loss)
        opt.step(params)
        result.history.append(float(loss.data))
    if valid_graphs is not None:
        yv = _check_labels(valid_labels, num_classes)
        pred = predict_classes(valid_graphs, state, result, valid_aux)
        result.error_rate = error_rate(pred, yv)
    else:
        result.error_rate = error_rate(predict_classes(train_graphs, state, result, train_aux), y)
    return result
