"""scikit-learn style estimators over the functional modules."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph import FlowGraph, graph_from_ir
from .pretrain import TrainConfig, load_checkpoint, pretrain_loop, save_checkpoint
from .tasks import ClassifierResult, embed_graphs, finetune_classifier, map_at_r, predict_classes
from .tokenizer import Tokenizer, train_bpe

_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]


def check_graphs(X, max_bb: int = 64, max_var: int = 256) -> list[FlowGraph]:
    """Coerce IR texts, graph dicts or FlowGraphs into a list of FlowGraphs."""
    if isinstance(X, (str, bytes, FlowGraph, dict)):
        raise TypeError("expected a sequence of programs, got a single item")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, FlowGraph):
            out.append(x)
        elif isinstance(x, dict):
            out.append(FlowGraph.from_dict(x))
        elif isinstance(x, str):
            out.append(graph_from_ir(x, max_bb, max_var))
        else:
            raise TypeError(f"item {i}: cannot interpret {type(x).__name__} as a program")
    return out


def check_texts(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("expected a sequence of strings, got a single string")
    texts = list(X)
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise TypeError(f"item {i}: expected str, got {type(t).__name__}")
    return texts


class IRGraphBuilder(TransformerMixin, BaseEstimator):
    """Parse textual IR modules into truncated flow graphs."""

    def __init__(self, max_bb: int = 64, max_var: int = 256):
        self.max_bb = max_bb
        self.max_var = max_var

    def fit(self, X, y=None):
        check_texts(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> list[FlowGraph]:
        return [graph_from_ir(t, self.max_bb, self.max_var) for t in check_texts(X)]


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Byte-level BPE over basic-block text; ``transform`` yields ``[CLS]``-prefixed ids."""

    def __init__(self, vocab_size: int = 2048, max_len: int = 64):
        self.vocab_size = vocab_size
        self.max_len = max_len

    def fit(self, X, y=None):
        self.tokenizer_ = train_bpe(check_texts(X), self.vocab_size)
        return self

    def transform(self, X) -> list[list[int]]:
        check_is_fitted(self, "tokenizer_")
        return [self.tokenizer_.encode(t, self.max_len) for t in check_texts(X)]


class FlowGraphEncoder(TransformerMixin, BaseEstimator):
    """Pre-trains the two-level encoder on ``fit``; ``transform`` returns program vectors.

    Accepts IR texts or FlowGraphs.  ``tokenizer`` may be a pre-trained
    :class:`Tokenizer`; otherwise one is trained on the fitted programs.
    """

    def __init__(self, d=64, ff_dim=128, n_layers_block=2, n_layers_encoder=2, n_heads=4,
                 max_block_tokens=64, max_bb=64, max_var=256, init_std=0.02, vocab_size=2048,
                 steps=1000, batch_size=4, lr=5e-5, warmup=100, schedule="constant",
                 weight_decay=0.01, margin=1.0, mlm_rate=0.15, flow_rate=0.15, cft_cap=0,
                 dft_cap=2048, rho_f=0.1, rho_n=0.1, seed=0, threads=1, checkpoint_every=0,
                 tokenizer=None):
        self.d = d
        self.ff_dim = ff_dim
        self.n_layers_block = n_layers_block
        self.n_layers_encoder = n_layers_encoder
        self.n_heads = n_heads
        self.max_block_tokens = max_block_tokens
        self.max_bb = max_bb
        self.max_var = max_var
        self.init_std = init_std
        self.vocab_size = vocab_size
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.margin = margin
        self.mlm_rate = mlm_rate
        self.flow_rate = flow_rate
        self.cft_cap = cft_cap
        self.dft_cap = dft_cap
        self.rho_f = rho_f
        self.rho_n = rho_n
        self.seed = seed
        self.threads = threads
        self.checkpoint_every = checkpoint_every
        self.tokenizer = tokenizer

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS})

    def fit(self, X, y=None, metrics_path=None, checkpoint_dir=None):
        graphs = check_graphs(X, self.max_bb, self.max_var)
        if not graphs:
            raise ValueError("cannot pre-train on an empty corpus")
        tok = self.tokenizer
        if tok is None:
            tok = train_bpe([n.text for g in graphs for n in g.bb_nodes], self.vocab_size)
        self.state_ = pretrain_loop(graphs, tok, self.train_config(), metrics_path=metrics_path,
                                    checkpoint_dir=checkpoint_dir)
        self.history_ = self.state_.history
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        return embed_graphs(check_graphs(X, self.max_bb, self.max_var), self.state_)

    def score(self, X, y, R: int | None = None) -> float:
        """MAP@R of the embeddings with ``y`` as the relevance classes."""
        return map_at_r(self.transform(X), y, R)

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        save_checkpoint(path, self.state_)

    @classmethod
    def from_checkpoint(cls, path) -> "FlowGraphEncoder":
        state = load_checkpoint(path)
        est = cls(**{k: getattr(state.train_config, k) for k in _TRAIN_KEYS},
                  tokenizer=state.tokenizer)
        est.state_ = state
        est.history_ = []
        return est


class FlowGraphClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes a fitted :class:`FlowGraphEncoder` with a linear classification head."""

    def __init__(self, encoder=None, steps=100, lr=1e-3, batch_size=8, weight_decay=0.0, seed=0):
        self.encoder = encoder
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def _graphs(self, X):
        enc = self.encoder
        return check_graphs(X, enc.max_bb, enc.max_var)

    def fit(self, X, y):
        if self.encoder is None:
            raise ValueError("FlowGraphClassifier needs a fitted FlowGraphEncoder")
        check_is_fitted(self.encoder, "state_")
        graphs = self._graphs(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        if len(graphs) != len(y_idx):
            raise ValueError("X and y differ in length")
        self.result_: ClassifierResult = finetune_classifier(
            graphs, y_idx, self.encoder.state_, len(self.classes_), steps=self.steps, lr=self.lr,
            batch_size=self.batch_size, seed=self.seed, weight_decay=self.weight_decay,
        )
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "result_")
        idx = predict_classes(self._graphs(X), self.encoder.state_, self.result_)
        return self.classes_[idx]

    def error_rate(self, X, y) -> float:
        return 1.0 - self.score(X, y)
