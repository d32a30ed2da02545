"""Finite-difference check of every model parameter's gradient of the total loss."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .graph import graph_from_ir
from .model import forward_batch, prepare_program
from .pretrain import PretrainState, TrainConfig, compute_losses, make_batch, new_state
from .tokenizer import train_bpe

log = logging.getLogger(__name__)

# Small two-function programs: calls, branches, phis and several DFG types.
GRADCHECK_PROGRAMS = (
    """
define i32 @g(i32 %a, i32 %b) {
entry:
  %s = add i32 %a, %b
  %c = icmp slt i32 %s, 4
  br i1 %c, label %lo, label %hi
lo:
  br label %hi
hi:
  %r = phi i32 [ %s, %entry ], [ 4, %lo ]
  ret i32 %r
}

define i32 @main(i32 %n) {
entry:
  %t = call i32 @g(i32 %n, i32 1)
  %u = mul i32 %t, %n
  ret i32 %u
}
""",
    """
define i32 @h(i32 %x) {
entry:
  %y = sub i32 %x, 1
  ret i32 %y
}

define i32 @main(i32 %n) {
entry:
  %z = icmp eq i32 %n, 0
  br i1 %z, label %done, label %body
body:
  %k = call i32 @h(i32 %n)
  br label %done
done:
  %w = phi i32 [ 0, %entry ], [ %k, %body ]
  ret i32 %w
}
""",
)

# Tables indexed by the batch; rows it never touches cannot affect the loss.
EMBEDDING_TABLES = ("tok_emb", "pos_emb", "var_emb")
BLOCK_PREFIXES = ("tok_emb", "pos_emb", "emb_ln.", "block.")


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    n_entries: int = 0
    n_evaluations: int = 0
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol


def gradcheck_setup(seed: int = 0, tc: TrainConfig | None = None):
    """Tiny model with random heads and bias tables plus one fixed pre-training batch."""
    tc = tc or TrainConfig.tiny(batch_size=2, seed=seed, max_block_tokens=16)
    graphs = [graph_from_ir(t, tc.max_bb, tc.max_var) for t in GRADCHECK_PROGRAMS]
    tok = train_bpe([n.text for g in graphs for n in g.bb_nodes], 48)
    state = new_state(graphs, tok, tc)
    # zero-initialized heads would block most gradient paths
    rng = np.random.default_rng(seed + 1)
    for name, p in state.params.items():
        if name.startswith(("head.", "bias.")):
            p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
    prepared = [prepare_program(g, tok, state.model_config, state.vocab) for g in graphs]
    batch = make_batch(state, graphs, prepared, step=0)
    return state, batch


def _loss(state: PretrainState, batch, block_states=None) -> float:
    progs, _ = batch.programs()
    out = forward_batch(progs, state.params, state.model_config, block_states=block_states)
    return float(compute_losses(out, batch, state.params, state.model_config,
                                state.train_config.margin)["L"].data)


def _used_rows(name: str, state: PretrainState, batch) -> np.ndarray:
    progs, _ = batch.programs()
    if name == "tok_emb":
        return np.unique(np.concatenate([b for p in progs for b in p.block_ids]))
    if name == "pos_emb":
        return np.arange(max(len(b) for p in progs for b in p.block_ids))
    return np.unique(np.concatenate([p.var_ids for p in progs]))


def run_gradcheck(seed: int = 0, eps: float = 1e-5, names=None) -> GradcheckReport:
    """Compare analytic gradients with central differences for every parameter entry.

    Embedding rows the batch never indexes are checked jointly: perturbing all
    of them must leave the loss bit-identical and their analytic gradient must
    be exactly zero.
    """
    t0 = time.time()
    state, batch = gradcheck_setup(seed)
    params, cfg = state.params, state.model_config
    progs, _ = batch.programs()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        out = forward_batch(progs, params, cfg)
        loss = compute_losses(out, batch, params, cfg, state.train_config.margin)["L"]
    tape.backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for k, p in params.items()}
    cached = out.block_states.data.copy()
    cached_t = ad.Tensor(cached)

    report = GradcheckReport()
    for name in names or list(params):
        p = params[name]
        block_dep = name.startswith(BLOCK_PREFIXES)
        f = (lambda: _loss(state, batch)) if block_dep else (lambda: _loss(state, batch, cached_t))
        if name in EMBEDDING_TABLES:
            used = _used_rows(name, state, batch)
            unused = np.setdiff1d(np.arange(p.shape[0]), used)
            numeric = np.zeros_like(p.data)
            for r in used:
                row = ad.Tensor(p.data[r])
                # view into the table so numerical_gradient perturbs it in place
                row.data = p.data[r]
                numeric[r] = ad.numerical_gradient(f, row, eps)
                report.n_evaluations += 2 * p.shape[1]
            if unused.size:
                base = f()
                old = p.data[unused].copy()
                p.data[unused] += eps
                moved = f()
                p.data[unused] = old
                report.n_evaluations += 2
                if moved != base or np.any(analytic[name][unused] != 0):
                    numeric[unused] = np.nan
        else:
            numeric = ad.numerical_gradient(f, p, eps)
            report.n_evaluations += 2 * p.data.size
        err = ad.relative_error(analytic[name], numeric)
        report.errors[name] = float("inf") if np.isnan(err) else err
        report.n_entries += p.data.size
    report.seconds = time.time() - t0
    return report
