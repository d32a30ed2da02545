import json

import numpy as np
import pytest

from irflow.graph import (
    CFG_FLOW_TYPES,
    ArityMismatch,
    EmptyModule,
    FlowGraph,
    dfg_flow_type,
    graph_from_ir,
    subgraph,
    to_dot,
    truncate,
    validate_graph,
)

# Hand-derived from the fixture source, in original value names.
CALLPAIR_CFG = {
    ("@f", "entry", "@f", "if.then", "br.T"),
    ("@f", "entry", "@f", "if.end", "br.F"),
    ("@f", "if.then", "@f", "if.end", "br.uncond"),
    ("@main", "entry", "@main", "if.end4", "br.T"),
    ("@main", "entry", "@main", "for.body", "br.F"),
    ("@main", "for.body", "@main", "for.inc", "br.T"),
    ("@main", "for.body", "@main", "if.end4", "br.F"),
    ("@main", "for.inc", "@main", "if.end4", "br.T"),
    ("@main", "for.inc", "@main", "for.body", "br.F"),
    ("@main", "for.inc", "@f", "entry", "call.func"),
    ("@f", "if.end", "@main", "for.inc", "call.return"),
}
CALLPAIR_DFG = {
    ("@f", "%m", "@f", "%cmp", "icmp.slt.1"),
    ("@f", "%x", "@f", "%cmp", "icmp.slt.2"),
    ("@f", "%x", "@f", "%sub", "sub.1"),
    ("@f", "%m", "@f", "%sub", "sub.2"),
    ("@f", "%sub", "@f", "%sum", "phi.1"),
    ("@f", "%x", "@f", "%sum", "phi.2"),
    ("@main", "%n", "@main", "%cmp", "icmp.slt.1"),
    ("@main", "%inc", "@main", "%i", "phi.2"),
    ("@main", "%n", "@main", "%j", "phi.1"),
    ("@main", "%call", "@main", "%j", "phi.2"),
    ("@main", "%i", "@main", "%rem", "srem.1"),
    ("@main", "%rem", "@main", "%tobool", "icmp.eq"),
    ("@main", "%i", "@main", "%call", "call.1"),
    ("@main", "%j", "@main", "%call", "call.2"),
    ("@main", "%i", "@main", "%inc", "add"),
    ("@main", "%inc", "@main", "%exitcond", "icmp.eq"),
    ("@main", "%n", "@main", "%exitcond", "icmp.eq"),
    ("@main", "%j", "@main", "%r", "phi.2"),
    ("@main", "%call", "@main", "%r", "phi.3"),
    ("@main", "%i", "@f", "%x", "call.arg"),
    ("@main", "%j", "@f", "%m", "call.arg"),
    ("@f", "%sum", "@main", "%call", "call.return"),
}
# Variables defined or used in each block.
CALLPAIR_BV = {
    ("@f", "entry"): {"%x", "%m", "%cmp"},
    ("@f", "if.then"): {"%x", "%m", "%sub"},
    ("@f", "if.end"): {"%x", "%sub", "%sum"},
    ("@main", "entry"): {"%n", "%cmp"},
    ("@main", "for.body"): {"%i", "%inc", "%j", "%n", "%call", "%rem", "%tobool"},
    ("@main", "for.inc"): {"%call", "%i", "%j", "%inc", "%exitcond", "%n"},
    ("@main", "if.end4"): {"%r", "%j", "%call"},
}


def named_flows(graph, rename):
    back = {fn: {new: old for old, new in m.items()} for fn, m in rename.items()}
    B, V = graph.bb_nodes, graph.var_nodes
    cfg = {(B[s].fn, B[s].label, B[t].fn, B[t].label, ty) for s, t, ty in graph.cfg_flows}
    dfg = {(V[s].fn, back[V[s].fn][V[s].name], V[t].fn, back[V[t].fn][V[t].name], ty)
           for s, t, ty in graph.dfg_flows}
    bv = {}
    for b, v in graph.bv_flows:
        bv.setdefault((B[b].fn, B[b].label), set()).add(back[V[v].fn][V[v].name])
    return cfg, dfg, bv


class TestCallPairGraph:
    def test_cfg_flows(self, callpair_graph, callpair_rename):
        assert named_flows(callpair_graph, callpair_rename)[0] == CALLPAIR_CFG

    def test_dfg_flows(self, callpair_graph, callpair_rename):
        assert named_flows(callpair_graph, callpair_rename)[1] == CALLPAIR_DFG

    def test_bv_flows(self, callpair_graph, callpair_rename):
        assert named_flows(callpair_graph, callpair_rename)[2] == CALLPAIR_BV

    def test_node_order(self, callpair_graph):
        assert [(n.fn, n.label) for n in callpair_graph.bb_nodes][:3] == [
            ("@f", "entry"), ("@f", "if.then"), ("@f", "if.end")]
        assert callpair_graph.n_bb == 7 and callpair_graph.n_var == 15

    def test_valid(self, callpair_graph):
        assert validate_graph(callpair_graph) == []


class TestFlowTypes:
    def test_commutative_has_no_position(self):
        assert dfg_flow_type("add", (), 2) == "add"
        assert dfg_flow_type("fmul", (), 1) == "fmul"
        assert dfg_flow_type("icmp", ("eq",), 2) == "icmp.eq"

    def test_positional(self):
        assert dfg_flow_type("sub", (), 2) == "sub.2"
        assert dfg_flow_type("icmp", ("sgt",), 1) == "icmp.sgt.1"

    def test_cfg_tag_set(self):
        assert CFG_FLOW_TYPES == ("br.uncond", "br.T", "br.F", "switch.case", "switch.default",
                                  "call.func", "call.return")


class TestBuildEdgeCases:
    def test_switch(self):
        text = """define i32 @s(i32 %a) {
entry:
  switch i32 %a, label %d [ i32 0, label %z
                           i32 1, label %o ]
z:
  ret i32 0
o:
  ret i32 1
d:
  ret i32 2
}
"""
        g = graph_from_ir(text)
        types = sorted(ty for _, _, ty in g.cfg_flows)
        assert types == ["switch.case", "switch.case", "switch.default"]

    def test_store_emits_single_flow(self):
        text = """define void @st(i32 %a) {
entry:
  %p = alloca i32
  store i32 %a, i32* %p
  ret void
}
"""
        g = graph_from_ir(text)
        assert [ty for _, _, ty in g.dfg_flows] == ["store.1"]

    def test_recursive_call_has_no_cfg_self_flow(self):
        text = """define i32 @r(i32 %a) {
entry:
  %x = call i32 @r(i32 %a)
  ret i32 %x
}
"""
        g = graph_from_ir(text)
        assert all(s != t for s, t, _ in g.cfg_flows)
        assert validate_graph(g) == []

    def test_arity_mismatch(self):
        text = """define i32 @g(i32 %a, i32 %b) {
entry:
  ret i32 %a
}
define i32 @main() {
entry:
  %x = call i32 @g(i32 1)
  ret i32 %x
}
"""
        with pytest.raises(ArityMismatch):
            graph_from_ir(text)

    def test_empty_module(self):
        with pytest.raises(EmptyModule):
            graph_from_ir("declare i32 @ext(i32)\n")

    def test_external_call_has_no_link(self):
        text = """declare i32 @ext(i32)
define i32 @main(i32 %a) {
entry:
  %x = call i32 @ext(i32 %a)
  ret i32 %x
}
"""
        g = graph_from_ir(text)
        assert g.cfg_flows == []
        assert [ty for _, _, ty in g.dfg_flows] == ["call.1"]


class TestTruncation:
    def test_limits_and_no_dangling(self, callpair_graph):
        t = truncate(callpair_graph, 3, 5)
        assert t.n_bb == 3 and t.n_var == 5
        assert validate_graph(t) == []

    def test_noop_within_limits(self, callpair_graph):
        t = truncate(callpair_graph, 64, 256)
        assert t.to_dict() == callpair_graph.to_dict()

    def test_subgraph_reindexes(self, callpair_graph):
        keep_bb = [3, 4, 5, 6]
        keep_var = list(range(5, 15))
        s = subgraph(callpair_graph, keep_bb, keep_var)
        assert {n.fn for n in s.bb_nodes} == {"@main"}
        assert validate_graph(s) == []
        # all intra-main flows survive
        assert len(s.dfg_flows) == 13


class TestSerialization:
    def test_json_roundtrip(self, callpair_graph, tmp_path):
        path = tmp_path / "g.json"
        callpair_graph.save(path)
        again = FlowGraph.load(path)
        assert again.to_dict() == callpair_graph.to_dict()
        doc = json.loads(path.read_text())
        assert {"bb_nodes", "var_nodes", "cfg_flows", "dfg_flows", "bv_flows"} <= set(doc)

    def test_dot_mentions_every_flow(self, callpair_graph):
        dot = to_dot(callpair_graph)
        assert dot.startswith("digraph")
        assert dot.count("->") == callpair_graph.n_flows
        assert 'label="call.func"' in dot

    def test_flows_sorted_and_unique(self, callpair_graph):
        flows = callpair_graph.dfg_flows
        assert flows == sorted(set(flows))
        assert np.all(np.diff([s for s, _, _ in flows]) >= 0)
