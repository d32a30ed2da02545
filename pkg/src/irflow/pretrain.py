"""Self-supervised pre-training: masking, flow-pair sampling, positives, losses, loop."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graph import CFG_FLOW_TYPES, CFG_TYPE_INDEX, BBNode, FlowGraph, VarNode, subgraph
from .model import (
    BatchOutput,
    FlowVocab,
    ModelConfig,
    ProgramInput,
    forward_batch,
    init_params,
    mlm_logits,
    prepare_program,
    with_flows,
)
from .tokenizer import CLS, MASK, PAD, SEP, Tokenizer

log = logging.getLogger(__name__)

STRATEGIES = ("permute", "downsample", "mutate", "nodes")
LOSS_KEYS = ("L_MLM", "L_CFT", "L_DFT", "L_BVP", "L_CL")


class NaNLoss(FloatingPointError):
    pass


class StrategyInapplicable(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Model and training settings, read from a ``key=value`` text file."""

    d: int = 64
    ff_dim: int = 128
    n_layers_block: int = 2
    n_layers_encoder: int = 2
    n_heads: int = 4
    max_block_tokens: int = 64
    max_bb: int = 64
    max_var: int = 256
    init_std: float = 0.02
    vocab_size: int = 2048
    steps: int = 1000
    batch_size: int = 4
    lr: float = 5e-5
    warmup: int = 100
    schedule: str = "constant"  # or "linear" decay after warmup
    weight_decay: float = 0.01
    margin: float = 1.0
    mlm_rate: float = 0.15
    flow_rate: float = 0.15
    cft_cap: int = 0  # 0 = no cap
    dft_cap: int = 2048
    rho_f: float = 0.1
    rho_n: float = 0.1
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0

    @classmethod
    def tiny(cls, **kw) -> "TrainConfig":
        base = dict(d=16, ff_dim=32, n_layers_block=2, n_layers_encoder=2, n_heads=2,
                    max_block_tokens=32, max_bb=16, max_var=64, init_std=0.1)
        base.update(kw)
        return cls(**base)

    def model_config(self, vocab_size: int, k_dfg: int) -> ModelConfig:
        return ModelConfig(
            d=self.d, ff_dim=self.ff_dim, n_layers_block=self.n_layers_block,
            n_layers_encoder=self.n_layers_encoder, n_heads=self.n_heads,
            max_block_tokens=self.max_block_tokens, max_bb=self.max_bb,
            max_var=self.max_var, k_dfg=k_dfg, vocab_size=vocab_size, init_std=self.init_std,
        )

    def updated(self, overrides: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(self)}
        values = asdict(self)
        for key, raw in overrides.items():
            key = key.strip()
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            current = values[key]
            values[key] = type(current)(float(raw)) if isinstance(current, int) and not isinstance(current, bool) else type(current)(raw)
        return TrainConfig(**values)

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "TrainConfig":
        return cls().updated({**parse_kv(Path(path).read_text()), **(overrides or {})})

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {no}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------
# masked language modeling


@dataclass
class MlmBatch:
    tokens: list[np.ndarray]  # corrupted sequences
    positions: list[tuple[int, int]]  # (block, position) pairs in M
    labels: np.ndarray  # original token at each masked position
    corruption: list[str]  # "mask" | "random" | "keep"


def mask_mlm(blocks, tokenizer: Tokenizer | int, rng, rate: float = 0.15) -> MlmBatch:
    """Select round(rate * usable) positions per block; 80/10/10 mask/random/keep.

    ``[CLS]``, ``[SEP]`` and ``[PAD]`` are never selected.  ``tokenizer`` may be
    the vocabulary size instead of a tokenizer.
    """
    vocab_size = tokenizer if isinstance(tokenizer, int) else tokenizer.vocab_size
    first = 5
    out_tokens, positions, labels, kinds = [], [], [], []
    for bi, seq in enumerate(blocks):
        seq = np.array(seq, dtype=np.int64)
        usable = np.flatnonzero(~np.isin(seq, (CLS, SEP, PAD)))
        n_mask = int(math.floor(rate * len(usable) + 0.5))
        chosen = np.sort(rng.choice(usable, size=n_mask, replace=False)) if n_mask else []
        for pos in chosen:
            labels.append(seq[pos])
            positions.append((bi, int(pos)))
            u = rng.random()
            if u < 0.8:
                seq[pos] = MASK
                kinds.append("mask")
            elif u < 0.9:
                seq[pos] = rng.integers(first, vocab_size) if vocab_size > first else seq[pos]
                kinds.append("random")
            else:
                kinds.append("keep")
        out_tokens.append(seq)
    return MlmBatch(out_tokens, positions, np.asarray(labels, dtype=np.int64), kinds)


# --------------------------------------------------------------------------
# flow-pair sampling


@dataclass
class FlowPairSample:
    pairs: np.ndarray  # (N, 2) ordered node pairs
    labels: np.ndarray  # (N,) 0 = no flow, else type index
    remaining: list  # flows left visible to the model


def _water_fill(avail: dict[int, int], budget: int, rng) -> dict[int, int]:
    """Spread ``budget`` as evenly as availability allows."""
    counts = {c: 0 for c in avail}
    active = [c for c in avail if avail[c] > 0]
    remaining = budget
    while remaining > 0 and active:
        order = [active[i] for i in rng.permutation(len(active))]
        share = remaining // len(order)
        if share == 0:
            for c in order[:remaining]:
                counts[c] += 1
            remaining = 0
            break
        for c in order:
            take = min(share, avail[c] - counts[c])
            counts[c] += take
            remaining -= take
        active = [c for c in active if counts[c] < avail[c]]
    return counts


def _pair_labels(flows) -> dict[tuple[int, int], int]:
    """Label of each flowing pair; the smallest type index when several flows share it."""
    labels = {}
    for s, t, k in flows:
        labels[(s, t)] = min(k, labels.get((s, t), k))
    return labels


def sample_pairs(n: int, flows, rate: float, cap: int | None, rng,
                 cap_no_flow: bool = True, n_cols: int | None = None) -> FlowPairSample:
    """Balanced sample over classes 0..k of ordered pairs in an n x n_cols grid.

    ``flows`` holds (src, dst, class >= 1) triples.  Sampled pairs' flows are
    removed from ``remaining``.
    """
    n_cols = n if n_cols is None else n_cols
    total = n * n_cols
    budget = int(math.floor(rate * total + 1e-9))
    if cap:
        budget = min(budget, cap)
    labels = _pair_labels(flows)
    by_class: dict[int, list] = {}
    for pair, c in sorted(labels.items()):
        by_class.setdefault(c, []).append(pair)
    avail = {c: len(v) for c, v in by_class.items()}
    avail[0] = total - len(labels)
    counts = _water_fill(avail, budget, rng)
    present = [counts[c] for c in by_class]
    if cap_no_flow and present:
        counts[0] = min(counts[0], int(math.ceil(sum(present) / len(present))))

    chosen_pairs, chosen_labels = [], []
    for c in sorted(by_class):
        pool = by_class[c]
        for i in sorted(rng.choice(len(pool), size=counts[c], replace=False)):
            chosen_pairs.append(pool[i])
            chosen_labels.append(c)
    if counts[0]:
        flat = np.ones(total, dtype=bool)
        for s, t in labels:
            flat[s * n_cols + t] = False
        free = np.flatnonzero(flat)
        for i in np.sort(rng.choice(free, size=counts[0], replace=False)):
            chosen_pairs.append((int(i // n_cols), int(i % n_cols)))
            chosen_labels.append(0)
    picked = set(chosen_pairs)
    remaining = [f for f in flows if (f[0], f[1]) not in picked]
    pairs = np.asarray(chosen_pairs, dtype=np.int64).reshape(-1, 2)
    return FlowPairSample(pairs, np.asarray(chosen_labels, dtype=np.int64), remaining)


def sample_flow_pairs(graph: FlowGraph, kind: str, rate: float = 0.15, cap: int | None = None,
                      rng=None, vocab: FlowVocab | None = None) -> FlowPairSample:
    """CFT/DFT pair sample over a graph's CFG or DFG nodes.

    Labels index the CFG tag set or ``vocab``'s DFG types (1-based, 0 = no
    flow).  ``remaining`` keeps the surviving flows with their type text.
    """
    rng = np.random.default_rng() if rng is None else rng
    if kind.upper() == "CFG":
        n, flows = graph.n_bb, graph.cfg_flows
        index = CFG_TYPE_INDEX
    elif kind.upper() == "DFG":
        n, flows = graph.n_var, graph.dfg_flows
        vocab = vocab or FlowVocab.from_graphs([graph])
        index = {t: vocab.dfg_index(t) for t in {ty for _, _, ty in flows}}
    else:
        raise ValueError(f"kind must be CFG or DFG, got {kind!r}")
    s = sample_pairs(n, [(a, b, index[t]) for a, b, t in flows], rate, cap, rng)
    picked = {tuple(p) for p in s.pairs.tolist()}
    s.remaining = [f for f in flows if (f[0], f[1]) not in picked]
    return s


def sample_bv_pairs(graph: FlowGraph, rate: float = 0.15, rng=None) -> FlowPairSample:
    """Balanced positive/negative (block, variable) pairs; positives leave the graph."""
    rng = np.random.default_rng() if rng is None else rng
    return sample_pairs(graph.n_bb, [(b, v, 1) for b, v in graph.bv_flows], rate, None, rng,
                        cap_no_flow=False, n_cols=graph.n_var)


def masked_graph(graph: FlowGraph, cft: FlowPairSample, dft: FlowPairSample,
                 bvp: FlowPairSample) -> FlowGraph:
    return FlowGraph(list(graph.bb_nodes), list(graph.var_nodes), cft.remaining, dft.remaining,
                     [(b, v) for b, v, _ in bvp.remaining])


# --------------------------------------------------------------------------
# positive examples


def _permute_functions(graph: FlowGraph, rng) -> FlowGraph:
    fns = graph.functions
    if len(fns) < 2:
        raise StrategyInapplicable("function permutation needs at least two functions")
    perm = rng.permutation(len(fns))
    if np.all(perm == np.arange(len(fns))):
        i, j = rng.choice(len(fns), size=2, replace=False)
        perm[i], perm[j] = perm[j], perm[i]
    order = [fns[i] for i in perm]
    keep_bb = [i for f in order for i, n in enumerate(graph.bb_nodes) if n.fn == f]
    keep_var = [i for f in order for i, n in enumerate(graph.var_nodes) if n.fn == f]
    return subgraph(graph, keep_bb, keep_var)


def _downsample_functions(graph: FlowGraph, rng) -> FlowGraph:
    fns = graph.functions
    if len(fns) < 2:
        raise StrategyInapplicable("function down-sampling needs at least two functions")
    k = int(rng.integers(1, len(fns)))
    drop = {fns[i] for i in rng.choice(len(fns), size=k, replace=False)}
    keep_bb = [i for i, n in enumerate(graph.bb_nodes) if n.fn not in drop]
    keep_var = [i for i, n in enumerate(graph.var_nodes) if n.fn not in drop]
    return subgraph(graph, keep_bb, keep_var)


def _mutate_flows(graph: FlowGraph, rng, rho_f: float) -> FlowGraph:
    cfg = list(graph.cfg_flows)
    dfg = list(graph.dfg_flows)
    bv = list(graph.bv_flows)
    n_edit = max(1, int(math.floor(rho_f * (len(cfg) + len(dfg) + len(bv)))))
    dfg_types = sorted({t for _, _, t in dfg})

    def add():
        kinds = []
        if graph.n_bb >= 2:
            kinds.append("cfg")
        if graph.n_var >= 1 and dfg_types:
            kinds.append("dfg")
        if not kinds:
            return False
        kind = kinds[int(rng.integers(len(kinds)))]
        for _ in range(10):
            if kind == "cfg":
                s, t = (int(x) for x in rng.choice(graph.n_bb, size=2, replace=False))
                if any(f[0] == s and f[1] == t for f in cfg):
                    continue
                cfg.append((s, t, CFG_FLOW_TYPES[int(rng.integers(len(CFG_FLOW_TYPES)))]))
            else:
                s, t = (int(x) for x in rng.integers(graph.n_var, size=2))
                if any(f[0] == s and f[1] == t for f in dfg):
                    continue
                dfg.append((s, t, dfg_types[int(rng.integers(len(dfg_types)))]))
            return True
        return False

    def remove():
        total = len(cfg) + len(dfg) + len(bv)
        if total == 0:
            return False
        i = int(rng.integers(total))
        if i < len(cfg):
            cfg.pop(i)
        elif i < len(cfg) + len(dfg):
            dfg.pop(i - len(cfg))
        else:
            bv.pop(i - len(cfg) - len(dfg))
        return True

    def retype():
        choices = [("cfg", i) for i in range(len(cfg))]
        if len(dfg_types) > 1:
            choices += [("dfg", i) for i in range(len(dfg))]
        if not choices:
            return remove()
        kind, i = choices[int(rng.integers(len(choices)))]
        if kind == "cfg":
            s, t, ty = cfg[i]
            alts = [x for x in CFG_FLOW_TYPES if x != ty]
            cfg[i] = (s, t, alts[int(rng.integers(len(alts)))])
        else:
            s, t, ty = dfg[i]
            alts = [x for x in dfg_types if x != ty]
            dfg[i] = (s, t, alts[int(rng.integers(len(alts)))])
        return True

    ops = {"add": add, "remove": remove, "retype": retype}
    for _ in range(n_edit):
        ops[("add", "remove", "retype")[int(rng.integers(3))]]()
    return FlowGraph(list(graph.bb_nodes), list(graph.var_nodes), cfg, dfg, bv)


def _edit_nodes(graph: FlowGraph, rng, rho_n: float, max_bb: int, max_var: int) -> FlowGraph:
    # nodes carry their original index so flows can be re-mapped at the end
    bbs = [(i, n) for i, n in enumerate(graph.bb_nodes)]
    vars_ = [(i, n) for i, n in enumerate(graph.var_nodes)]
    n_change = max(1, int(math.floor(rho_n * (len(bbs) + len(vars_)))))
    fns = graph.functions
    added = 0
    for _ in range(n_change):
        if rng.random() < 0.5:
            kind = "bb" if rng.random() < len(bbs) / max(1, len(bbs) + len(vars_)) else "var"
            fn = fns[int(rng.integers(len(fns)))]
            if kind == "bb" and len(bbs) < max_bb:
                text = bbs[int(rng.integers(len(bbs)))][1].text if bbs else "aug:"
                label = f"aug{added}"
                body = text.split("\n", 1)[1] if "\n" in text else ""
                node = BBNode(fn, label, f"{label}:\n{body}" if body else f"{label}:")
                at = max([k for k, (_, n) in enumerate(bbs) if n.fn == fn], default=len(bbs) - 1) + 1
                bbs.insert(at, (None, node))
                added += 1
            elif kind == "var" and len(vars_) < max_var:
                ids = [n.var_id for _, n in vars_ if n.fn == fn]
                node = VarNode(fn, f"%v{max(ids, default=-1) + 1}")
                at = max([k for k, (_, n) in enumerate(vars_) if n.fn == fn], default=len(vars_) - 1) + 1
                vars_.insert(at, (None, node))
                added += 1
        else:
            can_bb = len(bbs) > 1
            pick_bb = can_bb and (not vars_ or rng.random() < len(bbs) / (len(bbs) + len(vars_)))
            if pick_bb:
                bbs.pop(int(rng.integers(len(bbs))))
            elif vars_:
                vars_.pop(int(rng.integers(len(vars_))))
    bmap = {old: new for new, (old, _) in enumerate(bbs) if old is not None}
    vmap = {old: new for new, (old, _) in enumerate(vars_) if old is not None}
    return FlowGraph(
        [n for _, n in bbs], [n for _, n in vars_],
        [(bmap[s], bmap[t], ty) for s, t, ty in graph.cfg_flows if s in bmap and t in bmap],
        [(vmap[s], vmap[t], ty) for s, t, ty in graph.dfg_flows if s in vmap and t in vmap],
        [(bmap[b], vmap[v]) for b, v in graph.bv_flows if b in bmap and v in vmap],
    )


def augment_positive(graph: FlowGraph, strategy: str, rng, rho_f: float = 0.1,
                     rho_n: float = 0.1, max_bb: int = 64, max_var: int = 256) -> FlowGraph:
    """Build a positive example for contrastive learning.

    Strategies: ``permute`` (reorder functions), ``downsample`` (drop whole
    functions), ``mutate`` (add/remove/retype a fraction ``rho_f`` of flows) and
    ``nodes`` (add standalone or remove nodes, fraction ``rho_n``).
    """
    if strategy == "permute":
        return _permute_functions(graph, rng)
    if strategy == "downsample":
        return _downsample_functions(graph, rng)
    if strategy == "mutate":
        return _mutate_flows(graph, rng, rho_f)
    if strategy == "nodes":
        return _edit_nodes(graph, rng, rho_n, max_bb, max_var)
    raise ValueError(f"unknown strategy {strategy!r}")


def applicable_strategies(graph: FlowGraph) -> list[str]:
    multi = len(graph.functions) >= 2
    return [s for s in STRATEGIES if multi or s not in ("permute", "downsample")]


# --------------------------------------------------------------------------
# batches and losses


@dataclass
class AnchorSample:
    program: ProgramInput  # corrupted tokens, masked flows
    mlm: MlmBatch
    cft: FlowPairSample
    dft: FlowPairSample
    bvp: FlowPairSample
    positives: list[ProgramInput] = field(default_factory=list)


@dataclass
class PretrainBatch:
    anchors: list[AnchorSample]

    def programs(self) -> tuple[list[ProgramInput], list[int]]:
        progs = [a.program for a in self.anchors]
        owner = []
        for i, a in enumerate(self.anchors):
            progs.extend(a.positives)
            owner.extend([i] * len(a.positives))
        return progs, owner


def build_anchor(graph: FlowGraph, prepared: ProgramInput, tokenizer: Tokenizer,
                 cfg: ModelConfig, vocab: FlowVocab, tc: TrainConfig, rng,
                 with_positives: bool = True) -> AnchorSample:
    mlm = mask_mlm(prepared.block_ids, cfg.vocab_size, rng, tc.mlm_rate)
    cft = sample_pairs(graph.n_bb, prepared.cfg_flows, tc.flow_rate, tc.cft_cap or None, rng)
    dft = sample_pairs(graph.n_var, prepared.dfg_flows, tc.flow_rate, tc.dft_cap or None, rng)
    bvp = sample_pairs(graph.n_bb, [(b, v, 1) for b, v in prepared.bv_flows], tc.flow_rate,
                       None, rng, cap_no_flow=False, n_cols=graph.n_var)
    program = with_flows(prepared, cft.remaining, dft.remaining,
                         [(b, v) for b, v, _ in bvp.remaining])
    program.block_ids = mlm.tokens
    positives = []
    if with_positives:
        for strategy in applicable_strategies(graph):
            pos = augment_positive(graph, strategy, rng, tc.rho_f, tc.rho_n, cfg.max_bb, cfg.max_var)
            positives.append(prepare_program(pos, tokenizer, cfg, vocab))
    return AnchorSample(program, mlm, cft, dft, bvp, positives)


def _zero(name: str) -> Tensor:
    log.warning("%s: empty sample set, contributes 0", name)
    return Tensor(np.zeros(()))


def compute_losses(out: BatchOutput, batch: PretrainBatch, params: dict[str, Tensor],
                   cfg: ModelConfig, margin: float = 1.0) -> dict[str, Tensor]:
    """The five objectives and their unweighted sum ``L``."""
    d, L = cfg.d, out.L
    B = len(batch.anchors)
    H = ad.reshape(out.H, (out.H.shape[0] * L, d))

    # MLM over the block encoder's final states
    rows, labels = [], []
    for b, a in enumerate(batch.anchors):
        for bi, pos in a.mlm.positions:
            rows.append((out.block_offsets[b] + bi) * out.block_len + pos)
        labels.extend(a.mlm.labels.tolist())
    if rows:
        S = ad.reshape(out.block_states, (out.block_states.shape[0] * out.block_len, d))
        logits = mlm_logits(ad.take(S, rows), params)
        l_mlm = ad.cross_entropy(logits, labels)
    else:
        l_mlm = _zero("L_MLM")

    def pair_rows(sample_of, pos_u, pos_v):
        u, v, y = [], [], []
        for b, a in enumerate(batch.anchors):
            s = sample_of(a)
            for (i, j), c in zip(s.pairs.tolist(), s.labels.tolist()):
                u.append(b * L + pos_u(a.program, i))
                v.append(b * L + pos_v(a.program, j))
                y.append(c)
        return u, v, y

    def typed(name, sample_of, pos, head):
        u, v, y = pair_rows(sample_of, pos, pos)
        if not y:
            return _zero(name)
        hv = ad.concat([ad.take(H, u), ad.take(H, v)], axis=1)
        return ad.cross_entropy(ad.matmul(hv, params[f"{head}.w"]) + params[f"{head}.b"], y)

    l_cft = typed("L_CFT", lambda a: a.cft, ProgramInput.bb_pos, "head.cft")
    l_dft = typed("L_DFT", lambda a: a.dft, ProgramInput.var_pos, "head.dft")

    u, v, y = pair_rows(lambda a: a.bvp, ProgramInput.bb_pos, ProgramInput.var_pos)
    if y:
        scores = ad.tsum(ad.mul(ad.take(H, u), ad.take(H, v)), axis=1)
        l_bvp = ad.bce_with_logits(scores, np.asarray(y, dtype=float))
    else:
        l_bvp = _zero("L_BVP")

    l_cl = contrastive_loss(out.v, batch, margin)
    total = l_mlm + l_cft + l_dft + l_bvp + l_cl
    losses = {"L_MLM": l_mlm, "L_CFT": l_cft, "L_DFT": l_dft, "L_BVP": l_bvp, "L_CL": l_cl,
              "L": total}
    if not np.isfinite(total.data):
        raise NaNLoss(", ".join(f"{k}={float(t.data):.4g}" for k, t in losses.items()))
    return losses


def contrastive_loss(v: Tensor, batch: PretrainBatch, margin: float) -> Tensor:
    """Mean over anchors of max(0, D_pos - D_neg + margin).

    Rows ``0..B-1`` of ``v`` are anchors; the rest are positives in
    :meth:`PretrainBatch.programs` order.  Negatives are the other anchors.
    """
    B = len(batch.anchors)
    _, owner = batch.programs()
    if B < 2 or not owner:
        return _zero("L_CL")
    owner = np.asarray(owner)
    has_pos = np.bincount(owner, minlength=B) > 0
    # positive distances, averaged per anchor
    d_pos = ad.euclidean_distance(ad.take(v, owner), ad.take(v, B + np.arange(len(owner))))
    pos_avg = np.zeros((B, len(owner)))
    pos_avg[owner, np.arange(len(owner))] = 1.0
    pos_avg[has_pos] /= pos_avg[has_pos].sum(axis=1, keepdims=True)
    D_pos = ad.matmul(Tensor(pos_avg), ad.reshape(d_pos, (len(owner), 1)))
    # negative distances over ordered anchor pairs
    ai, bi = np.nonzero(~np.eye(B, dtype=bool))
    d_neg = ad.euclidean_distance(ad.take(v, ai), ad.take(v, bi))
    neg_avg = np.zeros((B, len(ai)))
    neg_avg[ai, np.arange(len(ai))] = 1.0 / (B - 1)
    D_neg = ad.matmul(Tensor(neg_avg), ad.reshape(d_neg, (len(ai), 1)))
    hinge = ad.relu(D_pos - D_neg + margin)
    keep = np.flatnonzero(has_pos)
    return ad.mean(ad.take(ad.reshape(hinge, (B,)), keep))


# --------------------------------------------------------------------------
# training loop


@dataclass
class PretrainState:
    params: dict[str, Tensor]
    model_config: ModelConfig
    vocab: FlowVocab
    tokenizer: Tokenizer
    train_config: TrainConfig
    optimizer: ad.AdamW
    step: int = 0
    history: list[dict] = field(default_factory=list)


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup to ``tc.lr`` over ``tc.warmup`` steps.

    Afterwards the rate stays constant, or with ``schedule=linear`` decays
    linearly to zero at ``tc.steps``.
    """
    if step < tc.warmup:
        return tc.lr * (step + 1) / tc.warmup
    if tc.schedule == "linear":
        span = max(1, tc.steps - tc.warmup)
        return tc.lr * max(0.0, (tc.steps - step) / span)
    return tc.lr


def new_state(graphs: list[FlowGraph], tokenizer: Tokenizer, tc: TrainConfig,
              vocab: FlowVocab | None = None) -> PretrainState:
    vocab = vocab or FlowVocab.from_graphs(graphs)
    cfg = tc.model_config(tokenizer.vocab_size, vocab.k_dfg)
    params = init_params(cfg, tc.seed)
    return PretrainState(params, cfg, vocab, tokenizer, tc,
                         ad.AdamW(tc.lr, weight_decay=tc.weight_decay))


def make_batch(state: PretrainState, graphs: list[FlowGraph], prepared: list[ProgramInput],
               step: int, with_positives: bool = True) -> PretrainBatch:
    tc = state.train_config
    rng = np.random.default_rng([tc.seed, step])
    idx = rng.choice(len(graphs), size=min(tc.batch_size, len(graphs)), replace=False)

    def build(slot):
        r = np.random.default_rng([tc.seed, step, int(slot) + 1])
        i = int(idx[slot])
        return build_anchor(graphs[i], prepared[i], state.tokenizer, state.model_config,
                            state.vocab, tc, r, with_positives)

    if tc.threads > 1:
        with ThreadPoolExecutor(tc.threads) as pool:
            anchors = list(pool.map(build, range(len(idx))))
    else:
        anchors = [build(s) for s in range(len(idx))]
    return PretrainBatch(anchors)


def train_step(state: PretrainState, batch: PretrainBatch) -> dict[str, float]:
    tc = state.train_config
    progs, _ = batch.programs()
    for p in state.params.values():
        p.grad = None
    with Tape() as tape:
        out = forward_batch(progs, state.params, state.model_config)
        losses = compute_losses(out, batch, state.params, state.model_config, tc.margin)
    tape.backward(losses["L"])
    state.optimizer.step(state.params, lr_at(state.step, tc))
    record = {"step": state.step, **{k: float(losses[k].data) for k in ("L",) + LOSS_KEYS}}
    state.step += 1
    state.history.append(record)
    return record


def pretrain_loop(graphs: list[FlowGraph], tokenizer: Tokenizer, tc: TrainConfig,
                  state: PretrainState | None = None, metrics_path=None,
                  checkpoint_dir=None, steps: int | None = None) -> PretrainState:
    """Run pre-training until ``tc.steps`` (or ``steps`` more) updates are done.

    Each step draws a batch from (seed, step) alone, so resuming from a
    checkpoint continues the identical trajectory.
    """
    state = state or new_state(graphs, tokenizer, tc)
    prepared = [prepare_program(g, tokenizer, state.model_config, state.vocab) for g in graphs]
    end = tc.steps if steps is None else state.step + steps
    metrics = open(metrics_path, "a") if metrics_path else None
    try:
        t0 = time.time()
        while state.step < end:
            batch = make_batch(state, graphs, prepared, state.step)
            rec = train_step(state, batch)
            if metrics:
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
            if state.step % 50 == 0 or state.step == end:
                log.info("step %d L=%.4f (%.1fs)", rec["step"], rec["L"], time.time() - t0)
            if checkpoint_dir and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step{state.step:06d}.ckpt", state)
    finally:
        if metrics:
            metrics.close()
    return state


def mlm_accuracy(state: PretrainState, graphs: list[FlowGraph], seed: int = 1234,
                 batch_size: int = 8) -> float:
    """Token accuracy at freshly masked positions over ``graphs``."""
    tc, cfg = state.train_config, state.model_config
    rng = np.random.default_rng(seed)
    correct = total = 0
    for i in range(0, len(graphs), batch_size):
        chunk = graphs[i : i + batch_size]
        progs, samples = [], []
        for g in chunk:
            p = prepare_program(g, state.tokenizer, cfg, state.vocab)
            mlm = mask_mlm(p.block_ids, cfg.vocab_size, rng, tc.mlm_rate)
            p.block_ids = mlm.tokens
            progs.append(p)
            samples.append(mlm)
        out = forward_batch(progs, state.params, cfg)
        if out.block_states is None:
            continue
        T = out.block_len
        rows, labels = [], []
        for b, mlm in enumerate(samples):
            rows += [(out.block_offsets[b] + bi) * T + pos for bi, pos in mlm.positions]
            labels += mlm.labels.tolist()
        if not rows:
            continue
        S = ad.reshape(out.block_states, (-1, cfg.d))
        pred = np.argmax(mlm_logits(ad.take(S, rows), state.params).data, axis=1)
        correct += int(np.sum(pred == np.asarray(labels)))
        total += len(rows)
    return correct / total if total else float("nan")


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: PretrainState, include_optimizer: bool = True) -> None:
    arrays = {k: p.data for k, p in state.params.items()}
    if include_optimizer:
        arrays.update(state.optimizer.state_arrays())
    meta = {
        "model_config": state.model_config.to_dict(),
        "flow_vocab": state.vocab.to_dict(),
        "tokenizer": state.tokenizer.to_dict(),
        "train_config": asdict(state.train_config),
        "step": state.step,
        "adam_t": state.optimizer.t,
    }
    ad.save_arrays(path, arrays, meta)


def load_checkpoint(path) -> PretrainState:
    arrays, meta = ad.load_arrays(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    tc = TrainConfig(**meta["train_config"])
    params = {k: ad.parameter(a, name=k) for k, a in arrays.items() if not k.startswith("adam.")}
    opt = ad.AdamW(tc.lr, weight_decay=tc.weight_decay)
    opt.load_state_arrays({k: a for k, a in arrays.items() if k.startswith("adam.")}, meta["adam_t"])
    return PretrainState(params, cfg, FlowVocab.from_dict(meta["flow_vocab"]),
                         Tokenizer.from_dict(meta["tokenizer"]), tc, opt, meta["step"])
