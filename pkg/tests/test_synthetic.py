import numpy as np
import pytest

from irflow.graph import graph_from_ir, validate_graph
from irflow.ir import parse_module
from irflow.synthetic import clone_corpus, random_corpus, random_program


class TestRandomPrograms:
    @pytest.mark.parametrize("seed", range(25))
    def test_parses_into_valid_graph(self, seed):
        text = random_program(seed)
        mod = parse_module(text)
        assert 2 <= len(mod.functions) <= 3
        validate_graph(graph_from_ir(text, 64, 256))

    def test_deterministic(self):
        assert random_corpus(5, 3) == random_corpus(5, 3)
        assert random_corpus(5, 3) != random_corpus(5, 4)

    def test_statement_range(self):
        small = random_corpus(10, 0, n_stmts=(1, 1))
        big = random_corpus(10, 0, n_stmts=(5, 5))
        assert np.mean([t.count("\n") for t in small]) < np.mean([t.count("\n") for t in big])


class TestCloneCorpus:
    def test_shape_and_labels(self):
        texts, labels = clone_corpus(4, 5, seed=1)
        assert len(texts) == 20
        assert labels == [c for c in range(4) for _ in range(5)]

    def test_variants_differ_but_parse(self):
        texts, labels = clone_corpus(3, 6, seed=2)
        for c in range(3):
            group = [t for t, y in zip(texts, labels) if y == c]
            assert len(set(group)) > 1
        for t in texts:
            validate_graph(graph_from_ir(t, 64, 256))

    def test_same_seed_same_corpus(self):
        assert clone_corpus(3, 3, seed=5) == clone_corpus(3, 3, seed=5)
