import math

import numpy as np
import pytest

from irflow import autodiff as ad
from irflow.graph import BBNode, FlowGraph, VarNode, graph_from_ir, validate_graph
from irflow.model import build_bias_matrix, forward_batch, prepare_program
from irflow.pretrain import (
    LOSS_KEYS,
    AnchorSample,
    NaNLoss,
    PretrainBatch,
    StrategyInapplicable,
    TrainConfig,
    applicable_strategies,
    augment_positive,
    compute_losses,
    contrastive_loss,
    load_checkpoint,
    lr_at,
    make_batch,
    mask_mlm,
    new_state,
    parse_kv,
    pretrain_loop,
    sample_bv_pairs,
    sample_flow_pairs,
    sample_pairs,
    save_checkpoint,
    train_step,
)
from irflow.synthetic import random_corpus
from irflow.tokenizer import CLS, MASK, PAD, SEP, train_bpe


def plain_graph(n_bb, n_var, cfg=(), dfg=(), bv=(), n_fn=1):
    bbs = [BBNode(f"f{i % n_fn}", f"b{i}", f"b{i}:\n  ret void") for i in range(n_bb)]
    vs = [VarNode(f"f{i % n_fn}", f"%{i}") for i in range(n_var)]
    return FlowGraph(bbs, vs, list(cfg), list(dfg), list(bv))


@pytest.fixture(scope="module")
def corpus():
    graphs = [graph_from_ir(t, 16, 64) for t in random_corpus(6, 11)]
    tok = train_bpe([n.text for g in graphs for n in g.bb_nodes], 72)
    return graphs, tok


def batch_losses(state, graphs, step=0):
    prepared = [prepare_program(g, state.tokenizer, state.model_config, state.vocab) for g in graphs]
    batch = make_batch(state, graphs, prepared, step)
    progs, _ = batch.programs()
    out = forward_batch(progs, state.params, state.model_config)
    return batch, compute_losses(out, batch, state.params, state.model_config,
                                 state.train_config.margin)


class TestConfig:
    def test_parse_kv(self):
        assert parse_kv("# c\nlr = 0.1\n\nsteps=5  # x\n") == {"lr": "0.1", "steps": "5"}
        with pytest.raises(ValueError):
            parse_kv("oops")

    def test_updated_types(self):
        tc = TrainConfig().updated({"steps": "12", "lr": "1e-3", "schedule": "linear"})
        assert tc.steps == 12 and tc.lr == 1e-3 and tc.schedule == "linear"
        with pytest.raises(KeyError):
            TrainConfig().updated({"nope": "1"})

    def test_file_roundtrip(self, tmp_path):
        tc = TrainConfig.tiny(seed=7)
        path = tmp_path / "c.txt"
        path.write_text(tc.to_text())
        assert TrainConfig.from_file(path) == tc

    def test_lr_schedule(self):
        tc = TrainConfig(lr=1.0, warmup=4, steps=12, schedule="linear")
        assert lr_at(0, tc) == 0.25 and lr_at(3, tc) == 1.0
        assert lr_at(8, tc) == pytest.approx(0.5)
        assert lr_at(12, tc) == 0.0
        assert lr_at(100, TrainConfig(lr=1.0, warmup=4)) == 1.0


class TestMasking:
    def test_count_and_specials(self, rng):
        seq = np.concatenate([[CLS], np.arange(10, 110), [SEP, PAD, PAD]])
        m = mask_mlm([seq], 200, rng)
        assert len(m.positions) == 15
        picked = [p for _, p in m.positions]
        assert 0 not in picked and all(seq[p] >= 10 for p in picked)
        np.testing.assert_array_equal(m.labels, seq[picked])

    def test_only_specials(self, rng):
        m = mask_mlm([np.array([CLS, SEP, PAD])], 50, rng)
        assert m.positions == [] and m.labels.size == 0

    def test_deterministic(self):
        seq = [np.arange(5, 45)]
        a = mask_mlm(seq, 60, np.random.default_rng(3))
        b = mask_mlm(seq, 60, np.random.default_rng(3))
        assert a.positions == b.positions and a.corruption == b.corruption

    def test_corruption_split(self):
        rng = np.random.default_rng(0)
        kinds = []
        for _ in range(200):
            seq = np.concatenate([[CLS], rng.integers(5, 60, size=100)])
            m = mask_mlm([seq], 60, rng)
            kinds += m.corruption
            for (_, p), kind in zip(m.positions, m.corruption):
                if kind == "mask":
                    assert m.tokens[0][p] == MASK
                elif kind == "keep":
                    assert m.tokens[0][p] == seq[p]
        frac = {k: kinds.count(k) / len(kinds) for k in ("mask", "random", "keep")}
        assert abs(frac["mask"] - 0.8) < 0.03
        assert abs(frac["random"] - 0.1) < 0.02 and abs(frac["keep"] - 0.1) < 0.02


class TestSampling:
    def test_budget_n64(self, rng):
        s = sample_flow_pairs(plain_graph(64, 1), "CFG", rng=rng)
        assert len(s.pairs) == 614 and not s.labels.any()

    def test_cfg_n10_all_present_classes(self, rng):
        types = ["br.uncond", "br.T", "br.F", "switch.case", "switch.default", "call.func",
                 "call.return"]
        flows = [(i, (i + 1) % 10, types[i % 7]) for i in range(10)]
        s = sample_flow_pairs(plain_graph(10, 1, cfg=flows), "CFG", rng=rng)
        assert len(s.pairs) <= 15
        assert set(range(1, 8)) <= set(s.labels.tolist())

    def test_bv_balanced(self, rng):
        bv = [(0, 0), (0, 1), (1, 2), (2, 3), (3, 4), (3, 5)]
        s = sample_bv_pairs(plain_graph(4, 10, bv=bv), rng=rng)
        assert len(s.pairs) == 6 and s.labels.sum() == 3
        assert len(s.remaining) == 3

    def test_no_bv_flows(self, rng):
        s = sample_bv_pairs(plain_graph(4, 10), rng=rng)
        assert len(s.pairs) == 6 and not s.labels.any()

    def test_cap(self, rng):
        s = sample_pairs(64, [], 0.15, 100, rng)
        assert len(s.pairs) == 100

    def test_no_flow_class_capped(self, rng):
        flows = [(0, 1, 1), (1, 2, 1), (2, 3, 2)]
        s = sample_pairs(20, flows, 0.15, None, rng)
        counts = np.bincount(s.labels, minlength=3)
        np.testing.assert_array_equal(counts, [2, 2, 1])

    def test_multi_flow_pair_label_is_min(self, rng):
        s = sample_pairs(2, [(0, 1, 3), (0, 1, 2)], 1.0, None, rng, cap_no_flow=False)
        assert dict(zip(map(tuple, s.pairs.tolist()), s.labels.tolist()))[(0, 1)] == 2
        assert s.remaining == []

    def test_masked_bias_loses_two_bv_entries(self, callpair_graph, small_tokenizer, rng):
        state = new_state([callpair_graph], small_tokenizer, TrainConfig.tiny())
        state.params["bias.bv"].data[:] = 1.0
        cfg, vocab = state.model_config, state.vocab
        full = prepare_program(callpair_graph, small_tokenizer, cfg, vocab)
        s = sample_bv_pairs(callpair_graph, rng=rng)
        masked = FlowGraph(callpair_graph.bb_nodes, callpair_graph.var_nodes, [], [],
                                   [(b, v) for b, v, _ in s.remaining])
        plain = FlowGraph(callpair_graph.bb_nodes, callpair_graph.var_nodes, [], [], callpair_graph.bv_flows)
        a = build_bias_matrix(prepare_program(plain, small_tokenizer, cfg, vocab), state.params, cfg)
        b = build_bias_matrix(prepare_program(masked, small_tokenizer, cfg, vocab), state.params, cfg)
        assert full.n == len(callpair_graph.var_nodes)
        assert np.count_nonzero(a.data) - np.count_nonzero(b.data) == 2 * int(s.labels.sum())


@pytest.fixture(scope="module")
def graph():
    return graph_from_ir(random_corpus(1, 4, n_functions=(3, 3))[0], 64, 256)


class TestAugment:
    @pytest.mark.parametrize("strategy", ["permute", "downsample", "mutate", "nodes"])
    def test_valid_and_deterministic(self, graph, strategy):
        a = augment_positive(graph, strategy, np.random.default_rng(1))
        b = augment_positive(graph, strategy, np.random.default_rng(1))
        validate_graph(a)
        assert a.to_dict() == b.to_dict()

    def test_permute_keeps_flow_multiset(self, graph):
        g = augment_positive(graph, "permute", np.random.default_rng(2))
        assert g.functions != graph.functions
        assert sorted(t for *_, t in g.cfg_flows) == sorted(t for *_, t in graph.cfg_flows)
        assert len(g.bv_flows) == len(graph.bv_flows)

    def test_downsample_shrinks(self, graph):
        g = augment_positive(graph, "downsample", np.random.default_rng(0))
        assert g.n_bb + g.n_var < graph.n_bb + graph.n_var

    def test_single_function_rejected(self, rng):
        g = plain_graph(3, 2)
        assert applicable_strategies(g) == ["mutate", "nodes"]
        with pytest.raises(StrategyInapplicable):
            augment_positive(g, "permute", rng)
        with pytest.raises(ValueError):
            augment_positive(g, "shuffle", rng)

    def test_mutation_edit_budget(self, rng):
        dfg = [(i, (i * 7 + 3) % 40, f"add.{i % 3}") for i in range(30)]
        cfg = [(i, i + 1, "br.uncond") for i in range(20)]
        g = plain_graph(21, 40, cfg=cfg, dfg=dfg)
        for seed in range(20):
            m = augment_positive(g, "mutate", np.random.default_rng(seed), rho_f=0.1)
            old, new = set(g.cfg_flows + g.dfg_flows), set(m.cfg_flows + m.dfg_flows)
            assert len(new - old) <= 5 and len(old - new) <= 5


class TestLosses:
    def test_zero_heads_uniform(self, corpus):
        graphs, tok = corpus
        state = new_state(graphs, tok, TrainConfig.tiny(batch_size=3))
        _, losses = batch_losses(state, graphs)
        assert abs(float(losses["L_CFT"].data) - math.log(8)) < 1e-6
        assert abs(float(losses["L_DFT"].data) - math.log(state.vocab.k_dfg + 1)) < 1e-6
        assert abs(float(losses["L_MLM"].data) - math.log(tok.vocab_size)) < 1e-6
        parts = sum(float(losses[k].data) for k in LOSS_KEYS)
        assert abs(float(losses["L"].data) - parts) <= 1e-12
        assert all(float(losses[k].data) >= 0 for k in LOSS_KEYS)

    def test_contrastive_equal_distances(self):
        anchors = [AnchorSample(None, None, None, None, None, [None]) for _ in range(3)]
        v = ad.Tensor(np.ones((6, 4)))
        assert float(contrastive_loss(v, PretrainBatch(anchors), 1.0).data) == 1.0

    def test_contrastive_separated(self):
        anchors = [AnchorSample(None, None, None, None, None, [None]) for _ in range(2)]
        v = ad.Tensor(np.array([[0.0, 0], [10, 0], [0, 0.1], [10, 0.1]]))
        assert float(contrastive_loss(v, PretrainBatch(anchors), 1.0).data) == 0.0

    def test_nan_detected(self, corpus):
        graphs, tok = corpus
        state = new_state(graphs, tok, TrainConfig.tiny(batch_size=2))
        state.params["head.cft.b"].data[0] = np.nan
        with pytest.raises(NaNLoss):
            batch_losses(state, graphs)


class TestTraining:
    def test_zero_lr_keeps_params(self, corpus):
        graphs, tok = corpus
        state = new_state(graphs, tok, TrainConfig.tiny(batch_size=2, lr=0.0, warmup=0))
        before = {k: p.data.copy() for k, p in state.params.items()}
        pretrain_loop(graphs, tok, state.train_config, state=state, steps=1)
        for k, p in state.params.items():
            np.testing.assert_array_equal(p.data, before[k], err_msg=k)

    def test_metrics_and_resume(self, corpus, tmp_path):
        graphs, tok = corpus
        tc = TrainConfig.tiny(batch_size=2, lr=1e-2, warmup=1, steps=3)
        full = pretrain_loop(graphs, tok, tc, metrics_path=tmp_path / "m.jsonl")
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 3 and '"L_CL"' in lines[0]

        part = pretrain_loop(graphs, tok, tc, steps=2)
        save_checkpoint(tmp_path / "c.ckpt", part)
        resumed = load_checkpoint(tmp_path / "c.ckpt")
        assert resumed.step == 2
        pretrain_loop(graphs, tok, tc, state=resumed)
        assert abs(resumed.history[-1]["L"] - full.history[-1]["L"]) <= 1e-9

    def test_threads_do_not_change_batches(self, corpus):
        graphs, tok = corpus
        a = pretrain_loop(graphs, tok, TrainConfig.tiny(batch_size=3, steps=2))
        b = pretrain_loop(graphs, tok, TrainConfig.tiny(batch_size=3, steps=2, threads=3))
        assert [r["L"] for r in a.history] == [r["L"] for r in b.history]

    def test_step_reduces_loss_on_same_batch(self, corpus):
        graphs, tok = corpus
        state = new_state(graphs, tok, TrainConfig.tiny(batch_size=3, lr=1e-2, warmup=0))
        prepared = [prepare_program(g, tok, state.model_config, state.vocab) for g in graphs]
        batch = make_batch(state, graphs, prepared, 0)
        first = train_step(state, batch)["L"]
        for _ in range(5):
            last = train_step(state, batch)["L"]
        assert last < first
