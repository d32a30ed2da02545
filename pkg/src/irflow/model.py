"""Two-level encoder over flow graphs.

Level one turns each basic block's token sequence into a vector (the ``[CLS]``
state of a small transformer) and looks up an embedding for each variable.
Level two runs a transformer over ``[CLS] blocks [SEP] variables [SEP]`` in
which every attention logit between two nodes joined by a flow gets a
learnable scalar for that flow's type.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import CFG_FLOW_TYPES, CFG_TYPE_INDEX, FlowGraph
from .tokenizer import CLS, PAD, Tokenizer

log = logging.getLogger(__name__)

NEG_INF = -1e9


class ConfigMismatch(ValueError):
    pass


class UnknownFlowType(KeyError):
    pass


class SequenceTooLong(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    ff_dim: int = 128
    n_layers_block: int = 2
    n_layers_encoder: int = 2
    n_heads: int = 4
    max_block_tokens: int = 64
    max_bb: int = 64
    max_var: int = 256
    p_cfg: int = len(CFG_FLOW_TYPES)
    k_dfg: int = 1
    vocab_size: int = 2048
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        for name in ("d", "ff_dim", "n_heads", "max_block_tokens", "max_bb", "max_var",
                     "p_cfg", "k_dfg", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def var_vocab_size(self) -> int:
        return self.max_var

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(d=16, ff_dim=32, n_layers_block=2, n_layers_encoder=2, n_heads=2,
                    max_block_tokens=32, max_bb=16, max_var=64, init_std=0.1)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class FlowVocab:
    """Stable indices for CFG (fixed tag set) and DFG (observed) flow types."""

    def __init__(self, dfg_types):
        self.cfg_types = list(CFG_FLOW_TYPES)
        self.dfg_types = sorted(set(dfg_types))
        if not self.dfg_types:
            # keep the table non-empty so a graph without data flows still has a head
            self.dfg_types = ["<none>"]
        self._dfg_index = {t: i + 1 for i, t in enumerate(self.dfg_types)}

    @classmethod
    def from_graphs(cls, graphs) -> "FlowVocab":
        return cls({ty for g in graphs for _, _, ty in g.dfg_flows})

    @property
    def p_cfg(self) -> int:
        return len(self.cfg_types)

    @property
    def k_dfg(self) -> int:
        return len(self.dfg_types)

    def cfg_index(self, t: str) -> int:
        try:
            return CFG_TYPE_INDEX[t]
        except KeyError:
            raise UnknownFlowType(f"unknown CFG flow type {t!r}") from None

    def dfg_index(self, t: str) -> int:
        try:
            return self._dfg_index[t]
        except KeyError:
            raise UnknownFlowType(f"unknown DFG flow type {t!r}") from None

    def __contains__(self, t: str) -> bool:
        return t in self._dfg_index

    def to_dict(self) -> dict:
        return {"dfg_types": self.dfg_types}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowVocab":
        return cls(d["dfg_types"])


# --------------------------------------------------------------------------
# parameters


def _layer_shapes(prefix: str, d: int, ff: int) -> dict[str, tuple]:
    return {
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (d, d), f"{prefix}.bk": (d,),
        f"{prefix}.wv": (d, d), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.w1": (d, ff), f"{prefix}.b1": (ff,),
        f"{prefix}.w2": (ff, d), f"{prefix}.b2": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d = cfg.d
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_block_tokens, d),
        "emb_ln.g": (d,), "emb_ln.b": (d,),
    }
    for i in range(cfg.n_layers_block):
        shapes.update(_layer_shapes(f"block.{i}", d, cfg.ff_dim))
    shapes.update({
        "var_emb": (cfg.var_vocab_size, d),
        "cls_emb": (d,), "sep_emb": (d,),
        "type_emb": (2, d),
    })
    for i in range(cfg.n_layers_encoder):
        shapes.update(_layer_shapes(f"enc.{i}", d, cfg.ff_dim))
    shapes.update({
        "bias.cfg": (cfg.p_cfg,), "bias.dfg": (cfg.k_dfg,), "bias.bv": (1,),
        # pre-training heads; dropped for downstream use
        "head.mlm.dense.w": (d, d), "head.mlm.dense.b": (d,),
        "head.mlm.ln.g": (d,), "head.mlm.ln.b": (d,),
        "head.mlm.w": (d, cfg.vocab_size), "head.mlm.b": (cfg.vocab_size,),
        "head.cft.w": (2 * d, cfg.p_cfg + 1), "head.cft.b": (cfg.p_cfg + 1,),
        "head.dft.w": (2 * d, cfg.k_dfg + 1), "head.dft.b": (cfg.k_dfg + 1,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif name.startswith(("head.", "bias.")) and name != "head.mlm.dense.w":
            # zero heads give uniform predictions at init
            value = np.zeros(shape)
        elif len(shape) == 1 and leaf.startswith("b"):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = ad.parameter(value, name=name)
    return params


def mlm_logits(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Token logits from block-encoder states: dense, GELU, LayerNorm, then projection."""
    t = ad.gelu(linear(h, params["head.mlm.dense.w"], params["head.mlm.dense.b"]))
    t = ad.layer_norm(t, params["head.mlm.ln.g"], params["head.mlm.ln.b"])
    return linear(t, params["head.mlm.w"], params["head.mlm.b"])


def encoder_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Parameters kept for downstream tasks (pre-training heads removed)."""
    return {k: v for k, v in params.items() if not k.startswith("head.")}


# --------------------------------------------------------------------------
# prepared inputs


@dataclass
class ProgramInput:
    """Tokenized blocks, variable ids and flows as bias-table indices."""

    block_ids: list[np.ndarray]
    var_ids: np.ndarray
    # (src, dst, type index) with type index 1-based within its table
    cfg_flows: list[tuple[int, int, int]] = field(default_factory=list)
    dfg_flows: list[tuple[int, int, int]] = field(default_factory=list)
    bv_flows: list[tuple[int, int]] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.block_ids)

    @property
    def n(self) -> int:
        return len(self.var_ids)

    @property
    def length(self) -> int:
        return self.m + self.n + 3

    def bb_pos(self, i: int) -> int:
        return 1 + i

    def var_pos(self, j: int) -> int:
        return self.m + 2 + j


def prepare_program(graph: FlowGraph, tokenizer: Tokenizer, cfg: ModelConfig,
                    vocab: FlowVocab, unknown: str = "error") -> ProgramInput:
    """Tokenize and index a graph for the model.

    ``unknown="drop"`` discards DFG flows whose type is outside ``vocab``
    instead of raising :class:`UnknownFlowType`.
    """
    if graph.n_bb > cfg.max_bb or graph.n_var > cfg.max_var:
        raise ConfigMismatch(
            f"graph has {graph.n_bb} blocks / {graph.n_var} variables; model limits are "
            f"{cfg.max_bb} / {cfg.max_var}"
        )
    blocks = [np.asarray(tokenizer.encode(n.text, cfg.max_block_tokens), dtype=np.int64)
              for n in graph.bb_nodes]
    for b in blocks:
        if b.size and b.max() >= cfg.vocab_size:
            raise ConfigMismatch("tokenizer vocabulary larger than model vocab_size")
    var_ids = np.array([min(n.var_id, cfg.var_vocab_size - 1) for n in graph.var_nodes],
                       dtype=np.int64)
    dfg = []
    dropped = 0
    for s, t, ty in graph.dfg_flows:
        if ty not in vocab:
            if unknown == "drop":
                dropped += 1
                continue
        dfg.append((s, t, vocab.dfg_index(ty)))
    if dropped:
        log.warning("dropped %d DFG flows with types unseen in training", dropped)
    return ProgramInput(
        blocks, var_ids,
        [(s, t, vocab.cfg_index(ty)) for s, t, ty in graph.cfg_flows],
        dfg,
        list(graph.bv_flows),
    )


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


def transformer_layer(x: Tensor, params: dict[str, Tensor], prefix: str, n_heads: int,
                      attn_bias=None, keep_logits: list | None = None) -> Tensor:
    """Post-LN encoder layer; ``attn_bias`` is added to every head's logits."""
    B, L, d = x.shape
    dh = d // n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, L, n_heads, dh)), (0, 2, 1, 3))

    p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    q = heads(linear(x, p("wq"), p("bq")))
    k = heads(linear(x, p("wk"), p("bk")))
    v = heads(linear(x, p("wv"), p("bv")))
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if attn_bias is not None:
        logits = logits + attn_bias
    if keep_logits is not None:
        keep_logits.append(logits.data.copy())
    attn = ad.softmax(logits, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
    x = ad.layer_norm(x + linear(ctx, p("wo"), p("bo")), p("ln1.g"), p("ln1.b"))
    ff = linear(ad.gelu(linear(x, p("w1"), p("b1"))), p("w2"), p("b2"))
    return ad.layer_norm(x + ff, p("ln2.g"), p("ln2.b"))


def _pad_blocks(blocks: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(b) for b in blocks)
    ids = np.full((len(blocks), T), PAD, dtype=np.int64)
    for i, b in enumerate(blocks):
        ids[i, : len(b)] = b
    return ids, ids != PAD


def block_encoder(blocks: list[np.ndarray], params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Final hidden states (Nb, T, d) of the shared basic-block transformer."""
    for b in blocks:
        if len(b) > cfg.max_block_tokens:
            raise SequenceTooLong(f"block of {len(b)} tokens exceeds {cfg.max_block_tokens}")
        if len(b) == 0 or b[0] != CLS:
            raise ValueError("block token sequences must start with [CLS]")
    ids, valid = _pad_blocks(blocks)
    Nb, T = ids.shape
    x = ad.take(params["tok_emb"], ids) + ad.take(params["pos_emb"], np.arange(T))
    x = ad.layer_norm(x, params["emb_ln.g"], params["emb_ln.b"])
    mask = np.where(valid, 0.0, NEG_INF)[:, None, None, :]
    for i in range(cfg.n_layers_block):
        x = transformer_layer(x, params, f"block.{i}", cfg.n_heads, mask)
    return x


def _encode_unique_blocks(blocks: list[np.ndarray], params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    # identical padded blocks give identical states, so encode each once
    ids, _ = _pad_blocks(blocks)
    uniq, inverse = np.unique(ids, axis=0, return_inverse=True)
    if len(uniq) == len(ids):
        return block_encoder(blocks, params, cfg)
    # the longest block is among the unique rows, so the padded length is unchanged
    states = block_encoder([row[row != PAD] for row in uniq], params, cfg)
    return ad.take(states, inverse.reshape(-1))


def embed_basic_blocks(blocks: list, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(m, d) matrix of block vectors: the final ``[CLS]`` state of each block."""
    if not blocks:
        return Tensor(np.zeros((0, cfg.d)))
    blocks = [np.asarray(b, dtype=np.int64) for b in blocks]
    h = block_encoder(blocks, params, cfg)
    Nb, T, d = h.shape
    return ad.take(ad.reshape(h, (Nb * T, d)), np.arange(Nb) * T)


def embed_variables(var_ids, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(n, d) rows of the variable embedding table (one-hot times a linear map)."""
    var_ids = np.asarray(var_ids, dtype=np.int64)
    if var_ids.size and (var_ids.min() < 0 or var_ids.max() >= cfg.var_vocab_size):
        raise IndexError(f"variable id out of range [0, {cfg.var_vocab_size})")
    if var_ids.size == 0:
        return Tensor(np.zeros((0, cfg.d)))
    return ad.take(params["var_emb"], var_ids)


@dataclass
class EncoderInput:
    I: Tensor  # (l, d) or (B, L, d)
    segment_ids: np.ndarray
    index_map: dict
    bias_matrix: Tensor | None = None
    key_mask: np.ndarray | None = None


def layout(m: int, n: int) -> tuple[np.ndarray, dict]:
    """Segment ids and node->position map for ``[CLS] b1..bm [SEP] v1..vn [SEP]``."""
    l = m + n + 3
    seg = np.zeros(l, dtype=np.int64)
    seg[m + 2 :] = 1
    index_map = {("bb", i): 1 + i for i in range(m)}
    index_map.update({("var", j): m + 2 + j for j in range(n)})
    index_map.update({"cls": 0, "sep1": m + 1, "sep2": l - 1})
    return seg, index_map


def assemble_input(Eb: Tensor, Ev: Tensor, params: dict[str, Tensor]) -> EncoderInput:
    """Concatenate node vectors with the special vectors and add node-type embeddings."""
    m, n = Eb.shape[0], Ev.shape[0]
    d = params["cls_emb"].shape[0]
    cls = ad.reshape(params["cls_emb"], (1, d))
    sep = ad.reshape(params["sep_emb"], (1, d))
    I_enc = ad.concat([cls, Eb, sep, Ev, sep], axis=0)
    seg, index_map = layout(m, n)
    I = I_enc + ad.take(params["type_emb"], seg)
    return EncoderInput(I, seg, index_map)


def flow_bias_entries(inp: ProgramInput, cfg: ModelConfig, offset: int = 0, L: int | None = None):
    """(table index, flat position) pairs for one program's bias matrix.

    The table is ``concat(bias.cfg, bias.dfg, bias.bv)``.  Typed flows apply
    at (src, dst); block-variable flows apply at both (block, var) and
    (var, block).  Several flows on one pair add up.
    """
    L = inp.length if L is None else L
    src, dst = [], []
    for s, t, k in inp.cfg_flows:
        src.append(k - 1)
        dst.append(offset + inp.bb_pos(s) * L + inp.bb_pos(t))
    for s, t, k in inp.dfg_flows:
        src.append(cfg.p_cfg + k - 1)
        dst.append(offset + inp.var_pos(s) * L + inp.var_pos(t))
    bv = cfg.p_cfg + cfg.k_dfg
    for b, v in inp.bv_flows:
        i, j = inp.bb_pos(b), inp.var_pos(v)
        src += [bv, bv]
        dst += [offset + i * L + j, offset + j * L + i]
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)


def bias_table(params: dict[str, Tensor]) -> Tensor:
    return ad.concat([params["bias.cfg"], params["bias.dfg"], params["bias.bv"]], axis=0)


def build_bias_matrix(inp: ProgramInput, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """l x l additive attention bias for one program (zero where no flow)."""
    for _, _, k in inp.cfg_flows:
        if not 1 <= k <= cfg.p_cfg:
            raise UnknownFlowType(f"CFG flow type index {k} outside table")
    for _, _, k in inp.dfg_flows:
        if not 1 <= k <= cfg.k_dfg:
            raise UnknownFlowType(f"DFG flow type index {k} outside table")
    l = inp.length
    src, dst = flow_bias_entries(inp, cfg)
    flat = ad.scatter_add(bias_table(params), src, dst, l * l)
    return ad.reshape(flat, (l, l))


@dataclass
class ProgramEmbedding:
    v: Tensor  # (d,) or (B, d)
    H: Tensor  # (l, d) or (B, L, d)
    logits: list = field(default_factory=list)


def encode_program(inp: EncoderInput, params: dict[str, Tensor], cfg: ModelConfig,
                   keep_logits: bool = False) -> ProgramEmbedding:
    """Run the flow-biased encoder; ``v`` is the final ``[CLS]`` state.

    Accepts a single program (``I`` of shape (l, d)) or a padded batch
    ((B, L, d) with ``key_mask`` marking real positions).
    """
    I = inp.I
    single = I.ndim == 2
    if single:
        I = ad.reshape(I, (1,) + I.shape)
    B, L, d = I.shape
    bias = None
    if inp.bias_matrix is not None:
        bm = inp.bias_matrix
        if bm.shape[-2:] != (L, L):
            raise ad.ShapeMismatch("encode_program", bm.shape, (L, L))
        bias = ad.reshape(bm, (B, 1, L, L))
    if inp.key_mask is not None:
        pad = np.where(inp.key_mask, 0.0, NEG_INF)[:, None, None, :]
        bias = pad if bias is None else bias + pad
    kept = [] if keep_logits else None
    x = I
    for i in range(cfg.n_layers_encoder):
        x = transformer_layer(x, params, f"enc.{i}", cfg.n_heads, bias, kept)
    v = ad.take(ad.reshape(x, (B * L, d)), np.arange(B) * L)
    if single:
        return ProgramEmbedding(ad.reshape(v, (d,)), ad.reshape(x, (L, d)), kept or [])
    return ProgramEmbedding(v, x, kept or [])


# --------------------------------------------------------------------------
# batched forward


@dataclass
class BatchOutput:
    H: Tensor  # (B, L, d) final encoder states
    v: Tensor  # (B, d)
    block_states: Tensor | None  # (Nb, T, d) block-encoder states, None when no blocks
    block_offsets: list[int]  # first block row of each program
    block_len: int  # padded block length T
    L: int


def forward_batch(programs: list[ProgramInput], params: dict[str, Tensor], cfg: ModelConfig,
                  use_bias: bool = True, block_states: Tensor | None = None) -> BatchOutput:
    """Encode several programs at once, padding to the longest.

    ``block_states`` reuses a previous block-encoder output for the same programs.
    """
    B = len(programs)
    d = cfg.d
    L = max(p.length for p in programs)
    all_blocks = [b for p in programs for b in p.block_ids]
    block_offsets, off = [], 0
    for p in programs:
        block_offsets.append(off)
        off += p.m
    Nb = len(all_blocks)

    pieces = [ad.reshape(params["cls_emb"], (1, d)), ad.reshape(params["sep_emb"], (1, d)),
              Tensor(np.zeros((1, d)))]
    states, T = None, 0
    if Nb:
        states = block_states if block_states is not None else _encode_unique_blocks(all_blocks, params, cfg)
        T = states.shape[1]
        pieces.append(ad.take(ad.reshape(states, (Nb * T, d)), np.arange(Nb) * T))
    var_ids = np.concatenate([p.var_ids for p in programs]) if programs else np.zeros(0, np.int64)
    if var_ids.size:
        pieces.append(embed_variables(var_ids, params, cfg))
    pool = ad.concat(pieces, axis=0)

    index = np.full((B, L), 2, dtype=np.int64)
    seg = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    var_off = 0
    for b, p in enumerate(programs):
        seg_b, _ = layout(p.m, p.n)
        l = p.length
        index[b, 0] = 0
        index[b, 1 : 1 + p.m] = 3 + block_offsets[b] + np.arange(p.m)
        index[b, p.m + 1] = 1
        index[b, p.m + 2 : p.m + 2 + p.n] = 3 + Nb + var_off + np.arange(p.n)
        index[b, l - 1] = 1
        seg[b, :l] = seg_b
        valid[b, :l] = True
        var_off += p.n
    I = ad.take(pool, index) + ad.take(params["type_emb"], seg)

    bias_matrix = None
    if use_bias:
        srcs, dsts = [], []
        for b, p in enumerate(programs):
            s, t = flow_bias_entries(p, cfg, offset=b * L * L, L=L)
            srcs.append(s)
            dsts.append(t)
        flat = ad.scatter_add(bias_table(params), np.concatenate(srcs), np.concatenate(dsts),
                              B * L * L)
        bias_matrix = ad.reshape(flat, (B, L, L))
    emb = encode_program(EncoderInput(I, seg, {}, bias_matrix, valid), params, cfg)
    return BatchOutput(emb.H, emb.v, states, block_offsets, T, L)


def embed_programs(programs: list[ProgramInput], params: dict[str, Tensor], cfg: ModelConfig,
                   batch_size: int = 16) -> np.ndarray:
    """Program vectors (N, d) computed without recording gradients."""
    out = []
    for i in range(0, len(programs), batch_size):
        out.append(forward_batch(programs[i : i + batch_size], params, cfg).v.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.d))


def with_flows(inp: ProgramInput, cfg_flows=None, dfg_flows=None, bv_flows=None) -> ProgramInput:
    return replace(
        inp,
        cfg_flows=inp.cfg_flows if cfg_flows is None else list(cfg_flows),
        dfg_flows=inp.dfg_flows if dfg_flows is None else list(dfg_flows),
        bv_flows=inp.bv_flows if bv_flows is None else list(bv_flows),
    )


def encode_single(inp: ProgramInput, params: dict[str, Tensor], cfg: ModelConfig,
                  use_bias: bool = True, keep_logits: bool = False) -> ProgramEmbedding:
    """Unbatched forward pass for one program; ``use_bias=False`` is the plain encoder."""
    Eb = embed_basic_blocks(inp.block_ids, params, cfg)
    Ev = embed_variables(inp.var_ids, params, cfg)
    enc = assemble_input(Eb, Ev, params)
    if use_bias:
        enc.bias_matrix = build_bias_matrix(inp, params, cfg)
    return encode_program(enc, params, cfg, keep_logits)
