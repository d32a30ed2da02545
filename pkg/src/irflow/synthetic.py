"""Deterministic random IR programs and clone corpora for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ARITH = ("add", "sub", "mul", "and", "or", "xor", "shl")
COMMUTATIVE = {"add", "mul", "and", "or", "xor"}
PREDICATES = ("slt", "sgt", "sle", "sge", "eq", "ne")
MIRROR = {"slt": "sgt", "sgt": "slt", "sle": "sge", "sge": "sle", "eq": "eq", "ne": "ne"}


# A statement is a small tuple; operands are value references ("v", k) or
# constants ("c", int) where k indexes the function's value list.
@dataclass
class FunctionPlan:
    name: str
    n_params: int
    stmts: list = field(default_factory=list)


@dataclass
class ProgramPlan:
    functions: list[FunctionPlan]


def _operand(rng, n_values: int):
    if n_values and rng.random() < 0.75:
        return ("v", int(rng.integers(n_values)))
    return ("c", int(rng.integers(0, 9)))


def random_plan(rng, n_functions: tuple[int, int] = (2, 3), n_stmts: tuple[int, int] = (2, 4)) -> ProgramPlan:
    """Random program structure: arithmetic, calls, if/merge and counted loops."""
    nf = int(rng.integers(n_functions[0], n_functions[1] + 1))
    fns = []
    for k in range(nf):
        name = "main" if k == nf - 1 else f"f{k}"
        fp = FunctionPlan(name, int(rng.integers(1, 3)))
        n_values = fp.n_params
        for _ in range(int(rng.integers(n_stmts[0], n_stmts[1] + 1))):
            kind = rng.choice(["arith", "arith", "call", "if", "loop"])
            if kind == "call" and k == 0:
                kind = "arith"
            if kind == "arith":
                fp.stmts.append(("arith", str(rng.choice(ARITH)), _operand(rng, n_values), _operand(rng, n_values)))
                n_values += 1
            elif kind == "call":
                callee = fns[int(rng.integers(k))]
                args = tuple(_operand(rng, n_values) for _ in range(callee.n_params))
                fp.stmts.append(("call", callee.name, args))
                n_values += 1
            elif kind == "if":
                pred = str(rng.choice(PREDICATES))
                fp.stmts.append(("if", pred, _operand(rng, n_values), _operand(rng, n_values),
                                 str(rng.choice(ARITH)), _operand(rng, n_values)))
                n_values += 3  # slots for the merged phi
            else:
                fp.stmts.append(("loop", int(rng.integers(2, 9)), str(rng.choice(ARITH)),
                                 _operand(rng, n_values)))
                n_values += 6  # i, acc, body, inc and aliases of body
        fns.append(fp)
    return ProgramPlan(fns)


@dataclass
class RenderOptions:
    """Semantics-preserving rewrites applied while printing a plan."""

    swap_commutative: float = 0.0
    mirror_compares: float = 0.0
    dead_code: float = 0.0
    permute_functions: bool = False


class _Emitter:
    def __init__(self, fp: FunctionPlan, rng, opts: RenderOptions):
        self.fp, self.rng, self.opts = fp, rng, opts
        self.values = [f"%a{i}" for i in range(fp.n_params)]
        self.lines: list[str] = []
        self.block = "entry"
        self.counter = 0

    def fresh(self, stem: str) -> str:
        self.counter += 1
        return f"%{stem}{self.counter}"

    def ref(self, op) -> str:
        kind, x = op
        if kind == "c":
            return str(x)
        return self.values[min(x, len(self.values) - 1)]

    def emit(self, text: str) -> None:
        self.lines.append("  " + text)

    def label(self, name: str) -> None:
        self.lines.append(f"{name}:")
        self.block = name

    def arith(self, op: str, a: str, b: str, stem: str = "t") -> str:
        if op in COMMUTATIVE and self.rng.random() < self.opts.swap_commutative:
            a, b = b, a
        out = self.fresh(stem)
        self.emit(f"{out} = {op} i32 {a}, {b}")
        self.maybe_dead()
        return out

    def icmp(self, pred: str, a: str, b: str) -> str:
        if self.rng.random() < self.opts.mirror_compares:
            pred, a, b = MIRROR[pred], b, a
        out = self.fresh("c")
        self.emit(f"{out} = icmp {pred} i32 {a}, {b}")
        return out

    def maybe_dead(self) -> None:
        if self.rng.random() < self.opts.dead_code:
            src = self.values[int(self.rng.integers(len(self.values)))] if self.values else "0"
            self.emit(f"{self.fresh('d')} = add i32 {src}, {int(self.rng.integers(1, 5))}")

    def render(self, params_of: dict[str, int]) -> str:
        for st in self.fp.stmts:
            kind = st[0]
            if kind == "arith":
                self.values.append(self.arith(st[1], self.ref(st[2]), self.ref(st[3])))
            elif kind == "call":
                out = self.fresh("r")
                args = ", ".join(f"i32 {self.ref(a)}" for a in st[2][: params_of[st[1]]])
                self.emit(f"{out} = call i32 @{st[1]}({args})")
                self.values.append(out)
            elif kind == "if":
                _, pred, a, b, op, c = st
                cmp = self.icmp(pred, self.ref(a), self.ref(b))
                n = self.counter
                then, join, pre = f"then{n}", f"join{n}", self.block
                base = self.ref(a)
                self.emit(f"br i1 {cmp}, label %{then}, label %{join}")
                self.label(then)
                tv = self.arith(op, base, self.ref(c))
                self.emit(f"br label %{join}")
                self.label(join)
                phi = self.fresh("p")
                self.emit(f"{phi} = phi i32 [ {tv}, %{then} ], [ {base}, %{pre} ]")
                # only i32 values that dominate later code stay usable
                self.values += [phi, phi, phi]
            else:
                _, bound, op, c = st
                n = self.counter + 1
                loop, exit_, pre = f"loop{n}", f"exit{n}", self.block
                init = self.ref(c)
                self.emit(f"br label %{loop}")
                self.label(loop)
                i, acc = f"%i{n}", f"%acc{n}"
                body, inc = f"%b{n}", f"%inc{n}"
                self.counter = n
                self.emit(f"{i} = phi i32 [ 0, %{pre} ], [ {inc}, %{loop} ]")
                self.emit(f"{acc} = phi i32 [ {init}, %{pre} ], [ {body}, %{loop} ]")
                a, b = acc, i
                if op in COMMUTATIVE and self.rng.random() < self.opts.swap_commutative:
                    a, b = b, a
                self.emit(f"{body} = {op} i32 {a}, {b}")
                self.emit(f"{inc} = add i32 {i}, 1")
                cmp = self.icmp("slt", inc, str(bound))
                self.emit(f"br i1 {cmp}, label %{loop}, label %{exit_}")
                self.label(exit_)
                self.values += [i, acc, body, inc, body, body]
        ret = self.values[-1] if self.values else "0"
        self.emit(f"ret i32 {ret}")
        params = ", ".join(f"i32 %a{i}" for i in range(self.fp.n_params))
        return "\n".join([f"define i32 @{self.fp.name}({params}) {{", "entry:"] + self.lines + ["}"])


def render_plan(plan: ProgramPlan, rng=None, opts: RenderOptions | None = None) -> str:
    """Print a plan as textual IR, optionally applying rewrites drawn from ``rng``."""
    rng = np.random.default_rng(0) if rng is None else rng
    opts = opts or RenderOptions()
    params_of = {f.name: f.n_params for f in plan.functions}
    order = list(range(len(plan.functions)))
    if opts.permute_functions:
        order = [int(i) for i in rng.permutation(len(order))]
    texts = [_Emitter(plan.functions[i], rng, opts).render(params_of) for i in order]
    return "\n\n".join(texts) + "\n"


def random_program(seed: int, **kw) -> str:
    """One random IR module, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    return render_plan(random_plan(rng, **kw), rng)


def random_corpus(n: int, seed: int = 0, **kw) -> list[str]:
    return [random_program(int(s), **kw) for s in np.random.SeedSequence(seed).generate_state(n)]


VARIANT_OPTIONS = RenderOptions(swap_commutative=0.5, mirror_compares=0.5, dead_code=0.2,
                                permute_functions=True)


def clone_corpus(n_classes: int = 10, n_variants: int = 10, seed: int = 0,
                 opts: RenderOptions = VARIANT_OPTIONS) -> tuple[list[str], list[int]]:
    """``n_classes`` base programs, each printed ``n_variants`` times with rewrites.

    Returns the IR texts and their class labels.
    """
    root = np.random.SeedSequence(seed)
    texts, labels = [], []
    for label, child in enumerate(root.spawn(n_classes)):
        plan_seed, variant_seed = child.spawn(2)
        plan = random_plan(np.random.default_rng(plan_seed))
        for vseq in variant_seed.spawn(n_variants):
            texts.append(render_plan(plan, np.random.default_rng(vseq), opts))
            labels.append(label)
    return texts, labels
