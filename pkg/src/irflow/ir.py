"""Parsing a structural subset of textual LLVM IR.

The parser keeps opcodes, predicate options and operands; types survive only
inside each instruction's ``raw_text``.  Anything outside the supported subset
is kept as an ``other.<name>`` instruction so that real compiler output still
parses.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

TERMINATORS = frozenset({"br", "ret", "switch", "invoke", "unreachable"})
UNSUPPORTED_TERMINATORS = frozenset(
    {"resume", "indirectbr", "callbr", "catchswitch", "catchret", "cleanupret"}
)
BINARY_OPS = frozenset(
    {"add", "sub", "mul", "sdiv", "udiv", "srem", "urem", "fadd", "fsub", "fmul",
     "fdiv", "frem", "shl", "lshr", "ashr", "and", "or", "xor"}
)
CAST_OPS = frozenset(
    {"zext", "sext", "trunc", "bitcast", "fptrunc", "fpext", "fptoui", "fptosi",
     "uitofp", "sitofp", "ptrtoint", "inttoptr", "addrspacecast"}
)
KNOWN_OPS = (
    TERMINATORS
    | BINARY_OPS
    | CAST_OPS
    | {"call", "icmp", "fcmp", "alloca", "load", "store", "getelementptr", "phi"}
)
# Instruction flags that carry no structural meaning for graph building.
_FLAGS = frozenset(
    {"nsw", "nuw", "exact", "inbounds", "fast", "nnan", "ninf", "nsz", "arcp",
     "contract", "afn", "reassoc", "volatile", "atomic", "disjoint", "nneg",
     "samesign", "inrange"}
)
_CALL_PREFIXES = frozenset({"tail", "musttail", "notail"})

_LOCAL = r'%(?:[-a-zA-Z$._0-9]+|"[^"]*")'
_GLOBAL = r'@(?:[-a-zA-Z$._0-9]+|"[^"]*")'
_LOCAL_RE = re.compile(_LOCAL)
_CALLEE_RE = re.compile(rf"({_GLOBAL}|{_LOCAL})\s*\(")
_LABEL_RE = re.compile(r'^("[^"]*"|[-a-zA-Z$._0-9]+):(\s.*)?$')
_RESULT_RE = re.compile(rf"^({_LOCAL})\s*=\s*(.*)$")
_DEFINE_NAME_RE = re.compile(rf"({_GLOBAL})\s*\(")


class ParseError(ValueError):
    """Malformed or unsupported IR; carries the 1-based source line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Operand:
    kind: str  # "local" | "global" | "constant" | "label"
    text: str


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: tuple[Operand, ...] = ()
    result: str | None = None
    options: tuple[str, ...] = ()
    raw_text: str = ""
    callee: str | None = None
    # phi only: incoming block for each value operand, in order
    incoming: tuple[str, ...] = ()

    @property
    def is_terminator(self) -> bool:
        return self.opcode in TERMINATORS

    @property
    def label_operands(self) -> list[str]:
        return [op.text for op in self.operands if op.kind == "label"]

    @property
    def value_operands(self) -> list[Operand]:
        return [op for op in self.operands if op.kind != "label"]


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instructions: tuple[Instruction, ...]

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]

    def text(self) -> str:
        """Label line plus instruction lines, newline-joined (tokenizer input)."""
        return "\n".join([f"{self.label}:"] + [i.raw_text for i in self.instructions])


@dataclass(frozen=True)
class IrFunction:
    name: str
    params: tuple[str, ...]
    blocks: tuple[BasicBlock, ...]
    returns_value: bool = True
    signature: str = ""
    variadic: bool = False

    @property
    def entry(self) -> BasicBlock:
        return self.blocks[0]

    def block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)


@dataclass(frozen=True)
class Declaration:
    name: str
    n_params: int
    variadic: bool = False
    signature: str = ""


@dataclass(frozen=True)
class IrModule:
    functions: tuple[IrFunction, ...] = ()
    declarations: tuple[Declaration, ...] = ()

    def function(self, name: str) -> IrFunction | None:
        for f in self.functions:
            if f.name == name:
                return f
        return None


# --------------------------------------------------------------------------
# low-level text helpers


def _strip_comment(line: str) -> str:
    in_quote = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_quote = not in_quote
        elif ch == ";" and not in_quote:
            return line[:i]
    return line


def split_top_level(text: str, sep: str = ",") -> list[str]:
    """Split on ``sep`` outside of (), [], {}, <> and quotes."""
    parts, depth, buf, in_quote = [], 0, [], False
    for ch in text:
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote:
            if ch in "([{<":
                depth += 1
            elif ch in ")]}>":
                depth -= 1
            elif ch == sep and depth == 0:
                parts.append("".join(buf).strip())
                buf = []
                continue
        buf.append(ch)
    tail = "".join(buf).strip()
    if tail or parts:
        parts.append(tail)
    return [p for p in parts if p]


def _matching_paren(text: str, start: int) -> int:
    depth, in_quote = 0, False
    for i in range(start, len(text)):
        ch = text[i]
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote:
            if ch in "([{<":
                depth += 1
            elif ch in ")]}>":
                depth -= 1
                if depth == 0:
                    return i
    raise ValueError("unbalanced brackets")


def _depth_delta(line: str) -> int:
    d, in_quote = 0, False
    for ch in line:
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote:
            if ch in "([":
                d += 1
            elif ch in ")]":
                d -= 1
    return d


def _classify(token: str) -> Operand:
    token = token.strip()
    if _LOCAL_RE.fullmatch(token):
        return Operand("local", token)
    if re.fullmatch(_GLOBAL, token):
        return Operand("global", token)
    return Operand("constant", token)


def _piece_value(piece: str) -> Operand | None:
    """Value carried by a ``<type> <value>`` piece; None for type-only pieces."""
    piece = piece.strip()
    if not piece or piece.startswith(("align ", "!")) or piece.startswith("addrspace"):
        return None
    if piece.endswith(")") and "(" in piece:
        # constant expression, e.g. getelementptr (...) or bitcast (...)
        return Operand("constant", piece)
    tokens = piece.split()
    if len(tokens) < 2:
        return None
    return _classify(tokens[-1])


def _drop_flags(tokens: list[str]) -> list[str]:
    i = 0
    while i < len(tokens) and tokens[i] in _FLAGS:
        i += 1
    return tokens[i:]


# --------------------------------------------------------------------------
# instruction parsing


def parse_instruction(text: str, line_no: int | None = None) -> Instruction:
    raw = text.strip()
    result = None
    m = _RESULT_RE.match(raw)
    body = raw
    if m:
        result, body = m.group(1), m.group(2).strip()
    head, _, rest = body.partition(" ")
    opcode = head
    if opcode in _CALL_PREFIXES:
        opcode, _, rest = rest.strip().partition(" ")
    rest = rest.strip()

    if opcode in UNSUPPORTED_TERMINATORS:
        raise ParseError(f"unknown terminator opcode '{opcode}'", line_no)

    if opcode == "br":
        pieces = split_top_level(rest)
        ops = []
        for p in pieces:
            toks = p.split()
            if toks[0] == "label":
                ops.append(Operand("label", toks[1].lstrip("%").strip('"')))
            else:
                ops.append(_classify(toks[-1]))
        return Instruction("br", tuple(ops), result, (), raw)

    if opcode == "ret":
        if rest == "void" or not rest:
            return Instruction("ret", (), result, (), raw)
        v = _piece_value(rest)
        return Instruction("ret", (v,) if v else (), result, (), raw)

    if opcode == "unreachable":
        return Instruction("unreachable", (), result, (), raw)

    if opcode == "switch":
        lb = rest.index("[")
        rb = _matching_paren(rest, lb)
        cond, default = split_top_level(rest[:lb])
        ops = [_classify(cond.split()[-1]),
               Operand("label", default.split()[-1].lstrip("%").strip('"'))]
        case_tokens = rest[lb + 1 : rb].replace(",", " , ").split()
        # cases: "<ty> <val> , label %dest"
        i = 0
        while i < len(case_tokens):
            if case_tokens[i] == "label":
                ops.append(Operand("label", case_tokens[i + 1].lstrip("%").strip('"')))
                i += 2
            else:
                i += 1
        return Instruction("switch", tuple(ops), result, (), raw)

    if opcode in ("call", "invoke"):
        cm = _CALLEE_RE.search(rest)
        if cm is None:
            raise ParseError(f"cannot find callee in '{raw}'", line_no)
        callee = cm.group(1)
        open_at = cm.end() - 1
        close_at = _matching_paren(rest, open_at)
        args = [_piece_value(a) or _classify(a) for a in split_top_level(rest[open_at + 1 : close_at])]
        ops = list(args)
        if opcode == "invoke":
            tail = rest[close_at + 1 :]
            for lab in re.findall(r"label\s+(%(?:[-a-zA-Z$._0-9]+|\"[^\"]*\"))", tail):
                ops.append(Operand("label", lab.lstrip("%").strip('"')))
        kind_callee = callee if callee.startswith("@") else None
        return Instruction(opcode, tuple(ops), result, (), raw, callee=kind_callee)

    if opcode in ("icmp", "fcmp"):
        toks = _drop_flags(rest.split())
        pred = toks[0]
        pieces = split_top_level(" ".join(toks[1:]))
        ops = [_classify(p.split()[-1]) for p in pieces]
        return Instruction(opcode, tuple(ops), result, (pred,), raw)

    if opcode == "phi":
        toks = _drop_flags(rest.split())
        rest2 = " ".join(toks)
        lb = rest2.index("[")
        vals, incoming = [], []
        for m2 in re.finditer(r"\[([^\]]*)\]", rest2[lb:]):
            v, blk = split_top_level(m2.group(1))
            vals.append(_classify(v))
            incoming.append(blk.strip().lstrip("%").strip('"'))
        return Instruction("phi", tuple(vals), result, (), raw, incoming=tuple(incoming))

    if opcode in BINARY_OPS:
        toks = _drop_flags(rest.split())
        pieces = split_top_level(" ".join(toks))
        ops = [_classify(p.split()[-1]) for p in pieces]
        return Instruction(opcode, tuple(ops), result, (), raw)

    if opcode in CAST_OPS:
        toks = rest.split()
        to_at = len(toks) - 1 - toks[::-1].index("to") if "to" in toks else len(toks)
        return Instruction(opcode, (_classify(toks[to_at - 1]),), result, (), raw)

    if opcode in ("load", "store", "alloca", "getelementptr"):
        toks = _drop_flags(rest.split())
        pieces = split_top_level(" ".join(toks))
        if opcode == "load" and pieces and len(pieces[0].split()) == 1:
            pieces = pieces[1:]
        if opcode in ("alloca", "getelementptr") and pieces and len(pieces[0].split()) == 1:
            pieces = pieces[1:]
        ops = [v for v in (_piece_value(p) for p in pieces) if v is not None]
        return Instruction(opcode, tuple(ops), result, (), raw)

    # permissive fallback: keep every top-level value-looking operand
    toks = _drop_flags(rest.split())
    ops = [v for v in (_piece_value(p) for p in split_top_level(" ".join(toks))) if v is not None]
    return Instruction(f"other.{opcode}", tuple(ops), result, (), raw)


# --------------------------------------------------------------------------
# module parsing


def _logical_lines(text: str):
    """Yield (line_no, line) with bracket-continued lines joined."""
    buf, start, depth = [], None, 0
    for no, line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(line).rstrip()
        if not line.strip() and not buf:
            continue
        if not buf:
            start = no
        buf.append(line.strip())
        depth += _depth_delta(line)
        if depth <= 0:
            yield start, " ".join(buf)
            buf, depth = [], 0
    if buf:
        yield start, " ".join(buf)


def _parse_params(sig: str) -> tuple[list[str | None], bool]:
    m = _DEFINE_NAME_RE.search(sig)
    if m is None:
        raise ValueError("no function name")
    open_at = m.end() - 1
    close_at = _matching_paren(sig, open_at)
    params, variadic = [], False
    for p in split_top_level(sig[open_at + 1 : close_at]):
        if p == "...":
            variadic = True
            continue
        toks = p.split()
        params.append(toks[-1] if len(toks) > 1 and _LOCAL_RE.fullmatch(toks[-1]) else None)
    return params, variadic


def parse_module(source_text: str) -> IrModule:
    """Parse IR text into an :class:`IrModule`.

    Raises :class:`ParseError` for blocks without a terminator, terminators in
    non-final position, unsupported terminators, undefined or duplicate block
    labels, and calls to undeclared functions.
    """
    functions: list[IrFunction] = []
    declarations: list[Declaration] = []
    cur = None  # dict describing the function being parsed

    def close_block(line_no):
        label, insts, start = cur["block"]
        if not insts:
            raise ParseError(f"block '{label}' is empty (missing terminator)", start)
        if not insts[-1].is_terminator:
            raise ParseError(f"block '{label}' missing terminator", line_no)
        cur["blocks"].append((BasicBlock(label, tuple(insts)), start))
        cur["block"] = None

    line_no = 0
    try:
        for line_no, line in _logical_lines(source_text):
            if cur is None:
                if line.startswith("declare"):
                    m = _DEFINE_NAME_RE.search(line)
                    if m is None:
                        raise ParseError("malformed declare", line_no)
                    params, variadic = _parse_params(line)
                    declarations.append(Declaration(m.group(1), len(params), variadic, line))
                elif line.startswith("define"):
                    m = _DEFINE_NAME_RE.search(line)
                    if m is None or not line.endswith("{"):
                        raise ParseError("malformed define", line_no)
                    raw_params, variadic = _parse_params(line)
                    counter, params = 0, []
                    for p in raw_params:
                        if p is None:
                            p = f"%{counter}"
                            counter += 1
                        params.append(p)
                    ret_ty = line[len("define"):m.start()].split()
                    cur = {
                        "name": m.group(1), "params": params, "variadic": variadic,
                        "void": bool(ret_ty) and ret_ty[-1] == "void",
                        "signature": line, "blocks": [], "block": None,
                        "counter": counter, "line": line_no,
                    }
                continue

            if line == "}":
                if cur["block"] is not None:
                    close_block(line_no)
                functions.append(_finish_function(cur))
                cur = None
                continue

            lm = _LABEL_RE.match(line)
            if lm:
                if cur["block"] is not None:
                    close_block(line_no)
                cur["block"] = (lm.group(1).strip('"'), [], line_no)
                continue

            if cur["block"] is None:
                if cur["blocks"]:
                    raise ParseError("instruction after terminator outside any block", line_no)
                cur["block"] = (str(cur["counter"]), [], line_no)
            label, insts, start = cur["block"]
            if insts and insts[-1].is_terminator:
                raise ParseError(f"terminator in non-final position of block '{label}'", line_no)
            insts.append(parse_instruction(line, line_no))
    except ParseError:
        raise
    except ValueError as exc:
        # helper splitters raise plain ValueError on malformed operands
        raise ParseError(str(exc), line_no) from exc

    if cur is not None:
        raise ParseError(f"unterminated function {cur['name']}", cur["line"])

    module = IrModule(tuple(functions), tuple(declarations))
    _check_module(module)
    return module


def _finish_function(cur) -> IrFunction:
    blocks = [b for b, _ in cur["blocks"]]
    if not blocks:
        raise ParseError(f"function {cur['name']} has no blocks", cur["line"])
    seen = {}
    for b, start in cur["blocks"]:
        if b.label in seen:
            raise ParseError(f"duplicate block label '{b.label}'", start)
        seen[b.label] = start
    for b, start in cur["blocks"]:
        for inst in b.instructions:
            for lab in list(inst.label_operands) + list(inst.incoming):
                if lab not in seen:
                    raise ParseError(f"reference to undefined block label '{lab}'", start)
    return IrFunction(
        name=cur["name"], params=tuple(cur["params"]), blocks=tuple(blocks),
        returns_value=not cur["void"], signature=cur["signature"],
        variadic=cur["variadic"],
    )


def _check_module(module: IrModule) -> None:
    names = [f.name for f in module.functions]
    if len(set(names)) != len(names):
        raise ParseError("duplicate function name")
    known = set(names) | {d.name for d in module.declarations}
    for f in module.functions:
        for b in f.blocks:
            for inst in b.instructions:
                if inst.callee is not None and inst.callee not in known:
                    raise ParseError(f"call to undeclared function {inst.callee}")


def print_module(module: IrModule) -> str:
    """Render a module back to IR text (round-trips through :func:`parse_module`)."""
    out = []
    for d in module.declarations:
        out.append(d.signature)
    for f in module.functions:
        if out:
            out.append("")
        out.append(f.signature)
        for b in f.blocks:
            out.append(f"{_quote_label(b.label)}:")
            out.extend("  " + i.raw_text for i in b.instructions)
        out.append("}")
    return "\n".join(out) + ("\n" if out else "")


def _quote_label(label: str) -> str:
    return label if re.fullmatch(r"[-a-zA-Z$._0-9]+", label) else f'"{label}"'


# --------------------------------------------------------------------------
# value normalization


def _rename_operand(op: Operand, mapping: dict[str, str]) -> Operand:
    if op.kind == "local" and op.text in mapping:
        return Operand("local", mapping[op.text])
    if op.kind == "constant" and mapping:
        return Operand("constant", _rename_text(op.text, mapping))
    return op


def _rename_text(text: str, mapping: dict[str, str]) -> str:
    return _LOCAL_RE.sub(lambda m: mapping.get(m.group(0), m.group(0)), text)


def normalize_values(module: IrModule) -> tuple[IrModule, dict[str, dict[str, str]]]:
    """Rename local values to ``%v0, %v1, ...`` per function.

    Parameters come first, then instruction results in program order.  Returns
    the rewritten module and ``{function name: {old: new}}``.
    """
    new_functions, maps = [], {}
    for f in module.functions:
        order = list(f.params) + [
            i.result for b in f.blocks for i in b.instructions if i.result is not None
        ]
        mapping = {}
        for name in order:
            if name not in mapping:
                mapping[name] = f"%v{len(mapping)}"
        maps[f.name] = mapping
        blocks = []
        for b in f.blocks:
            insts = tuple(
                replace(
                    i,
                    result=mapping.get(i.result, i.result) if i.result else None,
                    operands=tuple(_rename_operand(o, mapping) for o in i.operands),
                    raw_text=_rename_text(i.raw_text, mapping),
                )
                for i in b.instructions
            )
            blocks.append(BasicBlock(b.label, insts))
        new_functions.append(
            replace(
                f,
                params=tuple(mapping[p] for p in f.params),
                blocks=tuple(blocks),
                signature=_rename_text(f.signature, mapping),
            )
        )
    return replace(module, functions=tuple(new_functions)), maps


def local_definitions(function: IrFunction) -> list[str]:
    """Parameters followed by instruction results, in program order."""
    seen, out = set(), []
    for name in list(function.params) + [
        i.result for b in function.blocks for i in b.instructions if i.result
    ]:
        if name not in seen:
            seen.add(name)
            out.append(name)
    return out
