"""Flow-typed program graphs built from parsed IR.

A :class:`FlowGraph` holds basic-block nodes, variable nodes, and three flow
sets: typed control flows between blocks, typed data flows between variables,
and untyped block-variable membership flows.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .ir import IrFunction, IrModule, local_definitions

CFG_FLOW_TYPES = (
    "br.uncond", "br.T", "br.F", "switch.case", "switch.default", "call.func", "call.return",
)
CFG_TYPE_INDEX = {t: i + 1 for i, t in enumerate(CFG_FLOW_TYPES)}

COMMUTATIVE_OPCODES = frozenset({"add", "fadd", "mul", "fmul"})
COMMUTATIVE_PREDICATES = frozenset({"eq", "ne"})


class EmptyModule(ValueError):
    pass


class ArityMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BBNode:
    fn: str
    label: str
    text: str


@dataclass(frozen=True)
class VarNode:
    fn: str
    name: str

    @property
    def var_id(self) -> int:
        """Positional id of a normalized name (``%v7`` -> 7); 0 if not normalized."""
        m = re.fullmatch(r"%v(\d+)", self.name)
        return int(m.group(1)) if m else 0


@dataclass
class FlowGraph:
    bb_nodes: list[BBNode] = field(default_factory=list)
    var_nodes: list[VarNode] = field(default_factory=list)
    cfg_flows: list[tuple[int, int, str]] = field(default_factory=list)
    dfg_flows: list[tuple[int, int, str]] = field(default_factory=list)
    bv_flows: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.cfg_flows = sorted({tuple(f) for f in self.cfg_flows})
        self.dfg_flows = sorted({tuple(f) for f in self.dfg_flows})
        self.bv_flows = sorted({tuple(f) for f in self.bv_flows})

    @property
    def n_bb(self) -> int:
        return len(self.bb_nodes)

    @property
    def n_var(self) -> int:
        return len(self.var_nodes)

    @property
    def n_flows(self) -> int:
        return len(self.cfg_flows) + len(self.dfg_flows) + len(self.bv_flows)

    @property
    def functions(self) -> list[str]:
        """Function names in node order."""
        seen = []
        for n in list(self.bb_nodes) + list(self.var_nodes):
            if n.fn not in seen:
                seen.append(n.fn)
        return seen

    def copy(self) -> "FlowGraph":
        return FlowGraph(list(self.bb_nodes), list(self.var_nodes), list(self.cfg_flows),
                         list(self.dfg_flows), list(self.bv_flows))

    def to_dict(self) -> dict:
        return {
            "bb_nodes": [{"fn": n.fn, "label": n.label, "text": n.text} for n in self.bb_nodes],
            "var_nodes": [{"fn": n.fn, "name": n.name} for n in self.var_nodes],
            "cfg_flows": [list(f) for f in self.cfg_flows],
            "dfg_flows": [list(f) for f in self.dfg_flows],
            "bv_flows": [list(f) for f in self.bv_flows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowGraph":
        return cls(
            [BBNode(n["fn"], n["label"], n["text"]) for n in d["bb_nodes"]],
            [VarNode(n["fn"], n["name"]) for n in d["var_nodes"]],
            [(int(s), int(t), str(ty)) for s, t, ty in d["cfg_flows"]],
            [(int(s), int(t), str(ty)) for s, t, ty in d["dfg_flows"]],
            [(int(b), int(v)) for b, v in d["bv_flows"]],
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "FlowGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(indent=1))

    @classmethod
    def load(cls, path) -> "FlowGraph":
        return cls.from_json(Path(path).read_text())

    def bb_index(self, fn: str, label: str) -> int:
        for i, n in enumerate(self.bb_nodes):
            if n.fn == fn and n.label == label:
                return i
        raise KeyError((fn, label))

    def var_index(self, fn: str, name: str) -> int:
        for i, n in enumerate(self.var_nodes):
            if n.fn == fn and n.name == name:
                return i
        raise KeyError((fn, name))


def dfg_flow_type(opcode: str, options: tuple[str, ...], position: int) -> str:
    """``opcode[.option][.position]``; position only for non-commutative forms."""
    parts = [opcode, *options]
    if opcode in ("icmp", "fcmp"):
        commutative = bool(options) and options[0] in COMMUTATIVE_PREDICATES
    else:
        commutative = opcode in COMMUTATIVE_OPCODES
    if not commutative:
        parts.append(str(position))
    return ".".join(parts)


def build_cfg(function: IrFunction) -> tuple[list[BBNode], set[tuple[int, int, str]]]:
    """Block nodes and typed intra-function control flows (local indices)."""
    nodes = [BBNode(function.name, b.label, b.text()) for b in function.blocks]
    index = {b.label: i for i, b in enumerate(function.blocks)}
    flows = set()
    for i, b in enumerate(function.blocks):
        term = b.terminator
        labels = term.label_operands
        if term.opcode == "br":
            if len(labels) == 1:
                flows.add((i, index[labels[0]], "br.uncond"))
            else:
                flows.add((i, index[labels[0]], "br.T"))
                flows.add((i, index[labels[1]], "br.F"))
        elif term.opcode == "switch":
            flows.add((i, index[labels[0]], "switch.default"))
            for lab in labels[1:]:
                flows.add((i, index[lab], "switch.case"))
        elif term.opcode == "invoke":
            # treated as call + unconditional branch to the normal destination
            flows.add((i, index[labels[0]], "br.uncond"))
    return nodes, {f for f in flows if f[0] != f[1]}


def build_dfg(function: IrFunction) -> tuple[list[VarNode], set[tuple[int, int, str]]]:
    """Variable nodes and typed data flows with instructions folded into results."""
    names = local_definitions(function)
    nodes = [VarNode(function.name, n) for n in names]
    index = {n: i for i, n in enumerate(names)}
    flows = set()
    for b in function.blocks:
        for inst in b.instructions:
            values = inst.value_operands
            if inst.result is not None and inst.result in index:
                dst = index[inst.result]
                for pos, op in enumerate(values, start=1):
                    if op.kind != "local" or op.text not in index:
                        continue
                    if inst.opcode == "phi":
                        ty = f"phi.{pos}"
                    else:
                        ty = dfg_flow_type(inst.opcode, inst.options, pos)
                    flows.add((index[op.text], dst, ty))
            elif inst.opcode == "store" and len(values) == 2:
                val, addr = values
                if val.kind == "local" and addr.kind == "local" and addr.text in index:
                    if val.text in index:
                        flows.add((index[val.text], index[addr.text], "store.1"))
    return nodes, flows


def link_calls(module: IrModule, bb_offset: dict[str, int], var_offset: dict[str, int]):
    """Interprocedural flows for calls to functions defined in ``module``.

    ``bb_offset``/``var_offset`` give each function's first global node index.
    Returns (cfg flows, dfg flows) in global indices.
    """
    cfg, dfg = set(), set()
    for caller in module.functions:
        cvars = {n: var_offset[caller.name] + i for i, n in enumerate(local_definitions(caller))}
        for bi, b in enumerate(caller.blocks):
            caller_bb = bb_offset[caller.name] + bi
            for inst in b.instructions:
                if inst.opcode not in ("call", "invoke") or inst.callee is None:
                    continue
                callee = module.function(inst.callee)
                if callee is None:
                    continue  # external declaration
                args = inst.value_operands
                if len(args) != len(callee.params) and not (
                    callee.variadic and len(args) >= len(callee.params)
                ):
                    raise ArityMismatch(
                        f"{caller.name} calls {callee.name} with {len(args)} args, "
                        f"expects {len(callee.params)}"
                    )
                cfg.add((caller_bb, bb_offset[callee.name], "call.func"))
                evars = {n: var_offset[callee.name] + i
                         for i, n in enumerate(local_definitions(callee))}
                for ri, rb in enumerate(callee.blocks):
                    term = rb.terminator
                    if term.opcode != "ret":
                        continue
                    cfg.add((bb_offset[callee.name] + ri, caller_bb, "call.return"))
                    if inst.result is not None and term.operands:
                        rv = term.operands[0]
                        if rv.kind == "local" and rv.text in evars:
                            dfg.add((evars[rv.text], cvars[inst.result], "call.return"))
                for arg, param in zip(args, callee.params):
                    if arg.kind == "local" and arg.text in cvars:
                        dfg.add((cvars[arg.text], evars[param], "call.arg"))
    return {f for f in cfg if f[0] != f[1]}, dfg


def add_bv_flows(function: IrFunction, bb_offset: int, var_offset: int) -> set[tuple[int, int]]:
    """(block, variable) for each variable defined or used in each block."""
    index = {n: var_offset + i for i, n in enumerate(local_definitions(function))}
    flows = set()
    for bi, b in enumerate(function.blocks):
        for inst in b.instructions:
            names = [inst.result] if inst.result else []
            names += [op.text for op in inst.operands if op.kind == "local"]
            for name in names:
                if name in index:
                    flows.add((bb_offset + bi, index[name]))
    return flows


def build_program_graph(module: IrModule, max_bb: int = 64, max_var: int = 256) -> FlowGraph:
    """Compose CFG, DFG, call and BB-Var flows into one graph.

    ``module`` should already be normalized.  Nodes beyond ``max_bb`` blocks or
    ``max_var`` variables (in program order) are dropped with their flows.
    """
    if not module.functions:
        raise EmptyModule("module defines no function")
    bb_nodes, var_nodes = [], []
    cfg, dfg, bv = set(), set(), set()
    bb_offset, var_offset = {}, {}
    for f in module.functions:
        bb_offset[f.name], var_offset[f.name] = len(bb_nodes), len(var_nodes)
        nodes, flows = build_cfg(f)
        cfg |= {(s + len(bb_nodes), t + len(bb_nodes), ty) for s, t, ty in flows}
        vnodes, vflows = build_dfg(f)
        dfg |= {(s + len(var_nodes), t + len(var_nodes), ty) for s, t, ty in vflows}
        bv |= add_bv_flows(f, len(bb_nodes), len(var_nodes))
        bb_nodes += nodes
        var_nodes += vnodes
    ccfg, cdfg = link_calls(module, bb_offset, var_offset)
    graph = FlowGraph(bb_nodes, var_nodes, list(cfg | ccfg), list(dfg | cdfg), list(bv))
    return truncate(graph, max_bb, max_var)


def truncate(graph: FlowGraph, max_bb: int, max_var: int) -> FlowGraph:
    """Keep the first ``max_bb`` blocks and ``max_var`` variables."""
    if graph.n_bb <= max_bb and graph.n_var <= max_var:
        return graph
    return FlowGraph(
        graph.bb_nodes[:max_bb],
        graph.var_nodes[:max_var],
        [f for f in graph.cfg_flows if f[0] < max_bb and f[1] < max_bb],
        [f for f in graph.dfg_flows if f[0] < max_var and f[1] < max_var],
        [f for f in graph.bv_flows if f[0] < max_bb and f[1] < max_var],
    )


def subgraph(graph: FlowGraph, keep_bb, keep_var) -> FlowGraph:
    """Graph restricted to the given node index lists (in the order given)."""
    bmap = {old: new for new, old in enumerate(keep_bb)}
    vmap = {old: new for new, old in enumerate(keep_var)}
    return FlowGraph(
        [graph.bb_nodes[i] for i in keep_bb],
        [graph.var_nodes[i] for i in keep_var],
        [(bmap[s], bmap[t], ty) for s, t, ty in graph.cfg_flows if s in bmap and t in bmap],
        [(vmap[s], vmap[t], ty) for s, t, ty in graph.dfg_flows if s in vmap and t in vmap],
        [(bmap[b], vmap[v]) for b, v in graph.bv_flows if b in bmap and v in vmap],
    )


def validate_graph(graph: FlowGraph, known_dfg_types=None) -> list[str]:
    """Return a list of invariant violations (empty when the graph is well formed)."""
    problems = []
    nb, nv = graph.n_bb, graph.n_var
    for s, t, ty in graph.cfg_flows:
        if not (0 <= s < nb and 0 <= t < nb):
            problems.append(f"cfg flow index out of range: {(s, t, ty)}")
        if s == t:
            problems.append(f"cfg self-flow: {(s, t, ty)}")
        if ty not in CFG_TYPE_INDEX:
            problems.append(f"unknown cfg flow type: {ty}")
    for s, t, ty in graph.dfg_flows:
        if not (0 <= s < nv and 0 <= t < nv):
            problems.append(f"dfg flow index out of range: {(s, t, ty)}")
        if not ty:
            problems.append("empty dfg flow type")
        if known_dfg_types is not None and ty not in known_dfg_types:
            problems.append(f"unknown dfg flow type: {ty}")
    for b, v in graph.bv_flows:
        if not (0 <= b < nb and 0 <= v < nv):
            problems.append(f"bv flow index out of range: {(b, v)}")
            continue
        bn, vn = graph.bb_nodes[b], graph.var_nodes[v]
        if bn.fn != vn.fn or not re.search(re.escape(vn.name) + r"(?![-\w$.])", bn.text):
            problems.append(f"bv flow between unrelated nodes: {(b, v)}")
    return problems


def to_dot(graph: FlowGraph, name: str = "program") -> str:
    """Graphviz rendering with the flow type as edge label."""

    def q(s):
        return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'

    lines = [f"digraph {q(name)} {{", "  node [fontname=monospace];"]
    for i, n in enumerate(graph.bb_nodes):
        lines.append(f"  bb{i} [shape=box, label={q(n.fn + ':' + n.label)}];")
    for i, n in enumerate(graph.var_nodes):
        lines.append(f"  v{i} [shape=ellipse, label={q(n.fn + ':' + n.name)}];")
    for s, t, ty in graph.cfg_flows:
        lines.append(f"  bb{s} -> bb{t} [label={q(ty)}, color=orange];")
    for s, t, ty in graph.dfg_flows:
        lines.append(f"  v{s} -> v{t} [label={q(ty)}, color=blue];")
    for b, v in graph.bv_flows:
        lines.append(f"  bb{b} -> v{v} [style=dashed, arrowhead=none, color=gray];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_from_ir(text: str, max_bb: int = 64, max_var: int = 256) -> FlowGraph:
    """Parse, normalize and build in one call."""
    from .ir import normalize_values, parse_module

    module, _ = normalize_values(parse_module(text))
    return build_program_graph(module, max_bb, max_var)
