from .builders import (
    GraphBuilder,
    build_fc_stack,
    build_residual_stack,
    build_small_convnet,
    m_block,
    postact_residual_block,
    preact_residual_block,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .cromulence import CromulenceReport, require_cromulent, validate_cromulent
from .engine import GRAD_MODES, BackwardResult, StaleTapeError, Tape, backward, forward
from .graph import Graph, GraphError, Node, NodeKind
from .memory import MemoryLine, MemoryReport, memory_report

__all__ = [
    "GRAD_MODES",
    "BackwardResult",
    "CromulenceReport",
    "Graph",
    "GraphBuilder",
    "GraphError",
    "MemoryLine",
    "MemoryReport",
    "Node",
    "NodeKind",
    "StaleTapeError",
    "Tape",
    "backward",
    "build_fc_stack",
    "build_residual_stack",
    "build_small_convnet",
    "forward",
    "load_checkpoint",
    "m_block",
    "memory_report",
    "postact_residual_block",
    "preact_residual_block",
    "require_cromulent",
    "save_checkpoint",
    "validate_cromulent",
]
