"""Network DAG: node taxonomy, shape inference, parameter initialization, JSON topology."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .. import quantizers as qz
from ..normcore import DEFAULT_EPS, RunningStats
from ..tensorcore import make_rng


class NodeKind(str, Enum):
    INPUT = "input"
    LINEAR = "linear"
    CONV = "conv"
    IDENTITY = "identity"
    NORM = "norm"
    AFFINE = "affine"
    RELU = "relu"
    BRANCH = "branch"
    ADD = "add"
    CONCAT = "concat"
    AVGPOOL = "avgpool"
    MAXPOOL = "maxpool"

    @property
    def learnt(self) -> bool:
        return self in (NodeKind.LINEAR, NodeKind.CONV, NodeKind.IDENTITY)

    @property
    def star(self) -> bool:
        """Nodes allowed freely between learnt layers and the N-A-ReLU triple."""
        return self in (NodeKind.BRANCH, NodeKind.ADD, NodeKind.CONCAT, NodeKind.AVGPOOL, NodeKind.MAXPOOL)


@dataclass
class Node:
    name: str
    kind: NodeKind
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    running: RunningStats | None = None

    @property
    def scheme(self):
        s = self.attrs.get("scheme")
        return qz.get_scheme(s) if s else None


class GraphError(ValueError):
    pass


class Graph:
    """Nodes in insertion order, which must be a topological order."""

    def __init__(self, input_shape=None):
        self.nodes: dict[str, Node] = {}
        self.input_name: str | None = None
        self.output_name: str | None = None
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.version = 0

    def add(self, name: str, kind, inputs=(), **attrs) -> str:
        kind = NodeKind(kind)
        if name in self.nodes:
            raise GraphError(f"duplicate node name {name!r}")
        for src in inputs:
            if src not in self.nodes:
                raise GraphError(f"node {name!r} reads {src!r}, which is not defined before it")
        if kind == NodeKind.INPUT:
            if self.input_name is not None:
                raise GraphError("graph already has an input node")
            self.input_name = name
        self.nodes[name] = Node(name, kind, list(inputs), dict(attrs))
        return name

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    def __iter__(self):
        return iter(self.nodes.values())

    def consumers(self, name: str) -> list[str]:
        return [n.name for n in self if name in n.inputs for _ in range(n.inputs.count(name))]

    def successors(self) -> dict[str, list[str]]:
        succ = {name: [] for name in self.nodes}
        for node in self:
            for src in node.inputs:
                succ[src].append(node.name)
        return succ

    def norm_nodes(self) -> list[Node]:
        return [n for n in self if n.kind == NodeKind.NORM]

    def learnt_nodes(self) -> list[Node]:
        return [n for n in self if n.kind.learnt]

    def bump(self):
        """Mark parameters as changed; tapes recorded earlier become stale."""
        self.version += 1

    def check_structure(self):
        """Acyclic (by construction), single input/output, explicit fan-out, reachability."""
        if self.input_name is None:
            raise GraphError("graph has no input node")
        if self.output_name is None or self.output_name not in self.nodes:
            raise GraphError("graph has no output node")
        succ = self.successors()
        arity = {NodeKind.INPUT: (0, 0), NodeKind.ADD: (2, None), NodeKind.CONCAT: (2, None)}
        for node in self:
            lo, hi = arity.get(node.kind, (1, 1))
            n_in = len(node.inputs)
            if n_in < lo or (hi is not None and n_in > hi):
                raise GraphError(f"node {node.name!r} ({node.kind.value}) has {n_in} inputs")
            fan = len(succ[node.name])
            if node.kind == NodeKind.BRANCH:
                want = node.attrs.get("fanout", fan)
                if fan != want or fan < 1:
                    raise GraphError(f"branch {node.name!r} declares fanout {want} but feeds {fan} nodes")
            elif fan > 1:
                raise GraphError(f"node {node.name!r} feeds {fan} nodes; fan-out needs a branch node")
            elif fan == 0 and node.name != self.output_name:
                raise GraphError(f"node {node.name!r} is a dead end (not the output)")
        seen, stack = {self.input_name}, [self.input_name]
        while stack:
            for nxt in succ[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        missing = [n for n in self.nodes if n not in seen]
        if missing:
            raise GraphError(f"nodes unreachable from the input: {missing}")

    # -- shapes and parameters ---------------------------------------------

    def infer_shapes(self, input_shape=None) -> dict[str, tuple]:
        """Per-node output shape, excluding the batch axis."""
        shape_in = tuple(input_shape or self.input_shape or ())
        if not shape_in:
            raise GraphError("input shape unknown")
        shapes: dict[str, tuple] = {}
        for node in self:
            a = node.attrs
            ins = [shapes[i] for i in node.inputs]
            k = node.kind
            if k == NodeKind.INPUT:
                out = shape_in
            elif k == NodeKind.LINEAR:
                out = (a["out_features"],)
            elif k == NodeKind.CONV:
                if len(ins[0]) != 3:
                    raise GraphError(f"conv {node.name!r} needs a (c, h, w) input, got {ins[0]}")
                c, h, w = ins[0]
                ks, st, pd = a["kernel"], a.get("stride", 1), a.get("pad", 0)
                oh, ow = (h + 2 * pd - ks) // st + 1, (w + 2 * pd - ks) // st + 1
                if oh < 1 or ow < 1:
                    raise GraphError(f"conv {node.name!r} kernel {ks} too large for {h}x{w}")
                out = (a["out_channels"], oh, ow)
            elif k in (NodeKind.AVGPOOL, NodeKind.MAXPOOL):
                c, h, w = ins[0]
                ks, st, pd = a["size"], a.get("stride", a["size"]), a.get("pad", 0)
                out = (c, (h + 2 * pd - ks) // st + 1, (w + 2 * pd - ks) // st + 1)
                if out[1] < 1 or out[2] < 1:
                    raise GraphError(f"pool {node.name!r} window {ks} too large for {h}x{w}")
            elif k == NodeKind.ADD:
                if any(s != ins[0] for s in ins):
                    raise GraphError(f"add {node.name!r} input shapes differ: {ins}")
                out = ins[0]
            elif k == NodeKind.CONCAT:
                if any(s[1:] != ins[0][1:] for s in ins):
                    raise GraphError(f"concat {node.name!r} input shapes differ beyond axis 1: {ins}")
                out = (sum(s[0] for s in ins),) + ins[0][1:]
            else:
                out = ins[0]
            shapes[node.name] = tuple(int(d) for d in out)
        return shapes

    def init_params(self, seed: int = 0, dtype=np.float32):
        """He-uniform weights, zero biases, identity affine, fresh running statistics."""
        rng = make_rng(seed)
        shapes = self.infer_shapes()
        for node in self:
            a = node.attrs
            feat = shapes[node.name][0]
            if node.kind == NodeKind.LINEAR:
                fan_in = math.prod(shapes[node.inputs[0]])
                bound = math.sqrt(6.0 / fan_in)
                node.params = {
                    "W": rng.uniform(-bound, bound, size=(fan_in, a["out_features"])).astype(dtype),
                    "bias": np.zeros(a["out_features"], dtype=dtype),
                }
            elif node.kind == NodeKind.CONV:
                c = shapes[node.inputs[0]][0]
                ks = a["kernel"]
                bound = math.sqrt(6.0 / (c * ks * ks))
                node.params = {
                    "W": rng.uniform(-bound, bound, size=(a["out_channels"], c, ks, ks)).astype(dtype),
                    "bias": np.zeros(a["out_channels"], dtype=dtype),
                }
            elif node.kind == NodeKind.AFFINE:
                node.params = {"a": np.ones(feat, dtype=dtype), "b": np.zeros(feat, dtype=dtype)}
            elif node.kind == NodeKind.NORM:
                node.running = RunningStats(momentum=a.get("momentum", 0.1))
        self.bump()
        return self

    def astype(self, dtype):
        for node in self:
            node.params = {k: v.astype(dtype) for k, v in node.params.items()}
        self.bump()
        return self

    def set_scheme(self, scheme, nodes=None):
        """Set the quantization scheme (None for fp32) on the given Norm nodes (default: all)."""
        sid = qz.get_scheme(scheme).id if scheme else None
        targets = self.norm_nodes() if nodes is None else [self[n] for n in nodes]
        for node in targets:
            if node.kind != NodeKind.NORM:
                raise GraphError(f"{node.name!r} is not a norm node")
            node.attrs["scheme"] = sid
        return self

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "lpbn-graph",
            "version": 1,
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "output": self.output_name,
            "nodes": [
                {"name": n.name, "kind": n.kind.value, "inputs": list(n.inputs), **n.attrs} for n in self
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Graph":
        if d.get("format", "lpbn-graph") != "lpbn-graph":
            raise GraphError(f"not a graph document: format {d.get('format')!r}")
        g = cls(d.get("input_shape"))
        for spec in d["nodes"]:
            spec = dict(spec)
            name, kind = spec.pop("name"), spec.pop("kind")
            inputs = spec.pop("inputs", [])
            if kind == "bn":  # shorthand: norm followed by affine
                g.add(f"{name}.n", NodeKind.NORM, inputs, **spec)
                g.add(name, NodeKind.AFFINE, [f"{name}.n"])
                continue
            g.add(name, kind, inputs, **spec)
        g.output_name = d.get("output") or list(g.nodes)[-1]
        return g

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "Graph":
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise GraphError(f"malformed graph document: {exc}") from exc


def default_eps(node: Node) -> float:
    return node.attrs.get("eps", DEFAULT_EPS)
