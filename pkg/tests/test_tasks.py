from fractions import Fraction

import numpy as np
import pytest

from irflow.graph import graph_from_ir
from irflow.pretrain import TrainConfig, new_state
from irflow.tasks import (
    DegenerateClass,
    EmbeddingCorpus,
    LabelOutOfRange,
    average_precision_at_r,
    cosine_similarity,
    embed_corpus,
    embed_graphs,
    finetune_classifier,
    map_at_r,
    predict_classes,
)
from irflow.tokenizer import train_bpe


def int_program(seed: int) -> str:
    rng = np.random.default_rng(seed)
    body, prev = [], "%a"
    for i in range(int(rng.integers(2, 5))):
        op = ("add", "sub")[int(rng.integers(2))]
        body.append(f"  %t{i} = {op} i32 {prev}, {int(rng.integers(1, 9))}")
        prev = f"%t{i}"
    return "define i32 @f(i32 %a) {\nentry:\n" + "\n".join(body) + f"\n  ret i32 {prev}\n}}\n"


def float_program(seed: int) -> str:
    rng = np.random.default_rng(seed)
    body, prev = [], "%x"
    for i in range(int(rng.integers(2, 5))):
        op = ("fmul", "fdiv")[int(rng.integers(2))]
        body.append(f"  %u{i} = {op} double {prev}, %y")
        prev = f"%u{i}"
    return ("define double @g(double %x, double %y) {\nentry:\n" + "\n".join(body)
            + f"\n  ret double {prev}\n}}\n")


@pytest.fixture(scope="module")
def two_class():
    texts = [int_program(s) for s in range(8)] + [float_program(s) for s in range(8)]
    graphs = [graph_from_ir(t) for t in texts]
    labels = [0] * 8 + [1] * 8
    tok = train_bpe([n.text for g in graphs for n in g.bb_nodes], 80)
    state = new_state(graphs, tok, TrainConfig.tiny(seed=2))
    return graphs, labels, state


class TestMapAtR:
    def test_perfect_separation(self):
        v = np.repeat(np.eye(3), 3, axis=0)
        assert map_at_r(v, np.repeat([0, 1, 2], 3)) == 1.0

    def test_adversarial_hand_value(self):
        deg = np.radians([0, 10, 60, 70])
        v = np.stack([np.cos(deg), np.sin(deg)], axis=1)
        labels = ["a", "b", "a", "b"]
        assert map_at_r(v, labels, R=2, exact=True) == Fraction(1, 8)
        assert map_at_r(v, labels, exact=True) == 0

    def test_ap_definition(self):
        assert average_precision_at_r(np.array([1, 0, 1]), 3) == Fraction(1, 3) * (1 + Fraction(2, 3))

    def test_ties_break_by_index(self):
        v = np.ones((4, 2))
        # every candidate ties; query 0 sees [1, 2, 3]
        assert map_at_r(v, [0, 0, 1, 1], exact=True) == Fraction(1, 4) * (1 + 0 + 0 + 1)

    def test_degenerate(self):
        with pytest.raises(DegenerateClass):
            map_at_r(np.eye(3), [0, 0, 1])
        with pytest.raises(DegenerateClass):
            map_at_r(np.zeros((0, 2)), [])
        with pytest.raises(ValueError):
            map_at_r(np.eye(2), [0, 0], R=0)

    def test_zero_vectors_safe(self):
        S = cosine_similarity(np.zeros((2, 3)))
        assert not S.any()


class TestEmbedding:
    def test_identical_graphs_identical_vectors(self, two_class):
        graphs, _, state = two_class
        v = embed_graphs([graphs[0], graphs[0]], state)
        assert v.shape == (2, state.model_config.d)
        np.testing.assert_array_equal(v[0], v[1])

    def test_batch_size_invariant(self, two_class):
        graphs, _, state = two_class
        np.testing.assert_allclose(embed_graphs(graphs, state, batch_size=3),
                                   embed_graphs(graphs, state, batch_size=16), atol=1e-12)

    def test_empty(self, two_class):
        _, _, state = two_class
        assert embed_graphs([], state).shape == (0, state.model_config.d)

    def test_jsonl_roundtrip(self, two_class, tmp_path):
        graphs, labels, state = two_class
        corpus = embed_corpus(graphs[:4], state, labels=labels[:4])
        corpus.to_jsonl(tmp_path / "e.jsonl")
        back = EmbeddingCorpus.from_jsonl(tmp_path / "e.jsonl")
        assert back.ids == corpus.ids and back.labels == corpus.labels
        np.testing.assert_array_equal(back.vectors, corpus.vectors)

    def test_corpus_rejects_nan(self):
        with pytest.raises(ValueError):
            EmbeddingCorpus(["a"], [0], np.array([[np.nan]]))


class TestClassifier:
    def test_separable_classes(self, two_class):
        graphs, labels, state = two_class
        res = finetune_classifier(graphs, labels, state, 2, graphs, labels, steps=40, lr=1e-2,
                                  batch_size=8)
        assert res.error_rate == 0.0
        assert res.history[-1] < res.history[0]

    def test_zero_steps_chance(self, two_class):
        graphs, labels, state = two_class
        res = finetune_classifier(graphs, labels, state, 4, steps=0)
        assert np.all(predict_classes(graphs, state, res) == 0)
        assert res.error_rate == 0.5

    def test_aux_features(self, two_class):
        graphs, labels, state = two_class
        aux = np.asarray(labels, dtype=float)[:, None]
        res = finetune_classifier(graphs, labels, state, 2, steps=40, lr=1e-2, train_aux=aux)
        assert res.params["clf.w"].shape == (state.model_config.d + 1, 2)
        assert res.error_rate == 0.0

    def test_labels_checked(self, two_class):
        graphs, labels, state = two_class
        with pytest.raises(LabelOutOfRange):
            finetune_classifier(graphs, [5] * len(graphs), state, 2, steps=1)

    def test_pretrained_params_untouched(self, two_class):
        graphs, labels, state = two_class
        before = state.params["enc.0.wq"].data.copy()
        finetune_classifier(graphs, labels, state, 2, steps=3, lr=1e-2)
        np.testing.assert_array_equal(state.params["enc.0.wq"].data, before)
