"""Training-time activation memory: what the tape holds, fp32 versus quantized."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .. import quantizers as qz
from .engine import recomputable
from .graph import Graph, NodeKind


@dataclass
class MemoryLine:
    node: str
    kind: str
    count: int
    bytes_fp32: int
    bytes_quantized: int


@dataclass
class MemoryReport:
    bytes_fp32: int
    bytes_quantized: int
    lines: list[MemoryLine] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.bytes_quantized / self.bytes_fp32 if self.bytes_fp32 else 1.0

    def norm_subtotals(self) -> tuple[int, int]:
        """(fp32, quantized) bytes over Norm saves only."""
        norm = [ln for ln in self.lines if ln.kind == NodeKind.NORM.value]
        return sum(ln.bytes_fp32 for ln in norm), sum(ln.bytes_quantized for ln in norm)


def memory_report(g: Graph, batch_size: int, scheme=None, input_shape=None) -> MemoryReport:
    """Bytes of saved activations per training step.

    The fp32 column is what the same tape costs with 4-byte N(x); the quantized
    column packs each Norm save at the node's scheme (``scheme`` overrides all).
    Learnt inputs that cannot be rebuilt from Norm saves cost 4 bytes per value
    in both columns, and max-pool indices cost the same in both.
    """
    shapes = g.infer_shapes(input_shape)
    override = qz.get_scheme(scheme) if scheme else None
    memo: dict = {}
    lines: list[MemoryLine] = []
    notes: list[str] = []
    for node in g:
        k = node.kind
        if k == NodeKind.NORM:
            count = batch_size * math.prod(shapes[node.name])
            s = override or node.scheme
            quant = math.ceil(s.bits * count / 8) if s else 4 * count
            lines.append(MemoryLine(node.name, k.value, count, 4 * count, quant))
        elif k.learnt and not recomputable(g, node.inputs[0], memo):
            count = batch_size * math.prod(shapes[node.inputs[0]])
            lines.append(MemoryLine(node.name, k.value, count, 4 * count, 4 * count))
        elif k == NodeKind.MAXPOOL:
            count = batch_size * math.prod(shapes[node.name])
            width = 1 if node.attrs["size"] ** 2 <= 256 else 2
            lines.append(MemoryLine(node.name, k.value, count, width * count, width * count))
            notes.append(f"{node.name}: {width * count} bytes of argmax indices counted in both columns")
    return MemoryReport(
        sum(ln.bytes_fp32 for ln in lines), sum(ln.bytes_quantized for ln in lines), lines, notes
    )
