"""Constructors for the networks used in experiments and tests."""
from __future__ import annotations

from .graph import Graph, GraphError, NodeKind


class GraphBuilder:
    """Small helper that names nodes automatically and tracks the last output."""

    def __init__(self, input_shape, name: str = "x"):
        self.g = Graph(input_shape)
        self.g.add(name, NodeKind.INPUT)
        self._counts: dict[str, int] = {}

    def _name(self, prefix: str) -> str:
        self._counts[prefix] = self._counts.get(prefix, 0) + 1
        return f"{prefix}{self._counts[prefix]}"

    def add(self, kind, inputs, prefix=None, **attrs) -> str:
        kind = NodeKind(kind)
        inputs = [inputs] if isinstance(inputs, str) else list(inputs)
        return self.g.add(self._name(prefix or kind.value), kind, inputs, **attrs)

    def linear(self, x, out_features: int) -> str:
        return self.add(NodeKind.LINEAR, x, "fc", out_features=out_features)

    def conv(self, x, out_channels: int, kernel: int, stride: int = 1, pad: int = 0) -> str:
        return self.add(NodeKind.CONV, x, "conv", out_channels=out_channels, kernel=kernel, stride=stride, pad=pad)

    def bn(self, x, scheme=None) -> str:
        n = self.add(NodeKind.NORM, x, "norm", scheme=scheme)
        return self.add(NodeKind.AFFINE, n, "affine")

    def relu(self, x) -> str:
        return self.add(NodeKind.RELU, x)

    def bn_relu(self, x, scheme=None) -> str:
        return self.relu(self.bn(x, scheme))

    def branch(self, x, fanout: int) -> str:
        return self.add(NodeKind.BRANCH, x, fanout=fanout)

    def maxpool(self, x, size: int, stride: int, pad: int = 0) -> str:
        return self.add(NodeKind.MAXPOOL, x, "maxpool", size=size, stride=stride, pad=pad)

    def avgpool(self, x, size: int, stride: int | None = None, pad: int = 0) -> str:
        return self.add(NodeKind.AVGPOOL, x, "avgpool", size=size, stride=stride or size, pad=pad)

    def finish(self, output: str) -> Graph:
        self.g.output_name = output
        self.g.check_structure()
        return self.g


def build_fc_stack(n: int, scheme=None, input_dim: int = 3072, classes: int = 10) -> Graph:
    """FC(2^n)-BN-ReLU-FC(2^n)-BN-ReLU-FC(classes) on flat inputs."""
    if not 0 <= n <= 10:
        raise GraphError(f"width exponent must be in 0..10, got {n}")
    b = GraphBuilder((input_dim,))
    h = b.linear("x", 2**n)
    h = b.bn_relu(h, scheme)
    h = b.linear(h, 2**n)
    h = b.bn_relu(h, scheme)
    return b.finish(b.linear(h, classes))


def m_block(b: GraphBuilder, x: str, k: int, scheme=None) -> str:
    """kC3-BN-ReLU-kC3-MP3/2-BN-ReLU."""
    h = b.conv(x, k, 3, pad=1)
    h = b.bn_relu(h, scheme)
    h = b.conv(h, k, 3, pad=1)
    h = b.maxpool(h, 3, 2)
    return b.bn_relu(h, scheme)


def preact_residual_block(b: GraphBuilder, x: str, channels: int, scheme=None) -> str:
    """x -> branch; arm N-A-ReLU-C3-N-A-ReLU-C3; add rejoins with the identity shortcut."""
    split = b.branch(x, 2)
    h = b.bn_relu(split, scheme)
    h = b.conv(h, channels, 3, pad=1)
    h = b.bn_relu(h, scheme)
    h = b.conv(h, channels, 3, pad=1)
    return b.add(NodeKind.ADD, [h, split])


def postact_residual_block(b: GraphBuilder, x: str, channels: int, scheme=None) -> str:
    """Original ordering: C3-BN-ReLU-C3-BN, add shortcut, then ReLU. Not cromulent."""
    split = b.branch(x, 2)
    h = b.conv(split, channels, 3, pad=1)
    h = b.bn_relu(h, scheme)
    h = b.conv(h, channels, 3, pad=1)
    h = b.bn(h, scheme)
    h = b.add(NodeKind.ADD, [h, split])
    return b.relu(h)


def build_small_convnet(k: int = 8, blocks: int = 3, input_shape=(3, 32, 32), classes: int = 10, scheme=None) -> Graph:
    """M(k)-M(2k)-...-(2^blocks k)C-BN-ReLU-FC(classes), the final conv covering the remaining map."""
    if k < 1 or blocks < 1:
        raise GraphError("k and blocks must be positive")
    b = GraphBuilder(input_shape)
    h = "x"
    for i in range(blocks):
        h = m_block(b, h, k * 2**i, scheme)
    spatial = b.g.infer_shapes()[h][1]
    h = b.conv(h, k * 2**blocks, spatial)
    h = b.bn_relu(h, scheme)
    return b.finish(b.linear(h, classes))


def build_residual_stack(channels: int = 8, blocks: int = 2, input_shape=(3, 8, 8), classes: int = 10, scheme=None, post_activated: bool = False) -> Graph:
    """Stem conv, residual blocks, then BN-ReLU-avgpool-FC."""
    b = GraphBuilder(input_shape)
    h = b.conv("x", channels, 3, pad=1)
    if post_activated:
        h = b.bn_relu(h, scheme)
    block = postact_residual_block if post_activated else preact_residual_block
    for _ in range(blocks):
        h = block(b, h, channels, scheme)
    if not post_activated:
        h = b.bn_relu(h, scheme)
    h = b.avgpool(h, input_shape[1])
    return b.finish(b.linear(h, classes))
