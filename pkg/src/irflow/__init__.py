"""Flow-typed program graphs from textual IR and a two-level transformer encoder."""

from .estimators import BPETokenizer, FlowGraphClassifier, FlowGraphEncoder, IRGraphBuilder
from .graph import FlowGraph, build_program_graph, graph_from_ir
from .ir import parse_module
from .pretrain import TrainConfig, pretrain_loop
from .tasks import map_at_r
from .tokenizer import Tokenizer, train_bpe

__version__ = "0.1.0"

__all__ = [
    "BPETokenizer",
    "FlowGraph",
    "FlowGraphClassifier",
    "FlowGraphEncoder",
    "IRGraphBuilder",
    "Tokenizer",
    "TrainConfig",
    "build_program_graph",
    "graph_from_ir",
    "map_at_r",
    "parse_module",
    "pretrain_loop",
    "train_bpe",
]
