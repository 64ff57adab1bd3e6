"""Forward pass with a minimal tape, and the reverse sweep.

The tape keeps packed quantized N(x) for every Norm node, argmax indices for
max pooling, and a full-precision copy of a learnt layer's input only when
that input cannot be rebuilt from Norm saves (e.g. the raw network input).
Affine and ReLU outputs are never stored; the backward sweep recomputes them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import normcore as nc
from .. import quantizers as qz
from .. import tensorcore as tc
from ..fusedexec import fold_norm_into_learnt
from .graph import Graph, GraphError, NodeKind, default_eps

GRAD_MODES = ("float", "quantize_at_input", "quantize_partial_sums")


class StaleTapeError(RuntimeError):
    pass


@dataclass
class TapeEntry:
    norm: nc.BNSavedState | None = None
    saved_input: np.ndarray | None = None
    indices: np.ndarray | None = None
    in_shapes: list[tuple] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.norm is None and self.saved_input is None and self.indices is None

    @property
    def nbytes(self) -> int:
        n = self.norm.activation_bytes if self.norm is not None else 0
        n += self.saved_input.nbytes if self.saved_input is not None else 0
        n += self.indices.nbytes if self.indices is not None else 0
        return n


@dataclass
class Tape:
    version: int
    entries: dict[str, TapeEntry]
    dtype: np.dtype

    def activation_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries.values())


@dataclass
class BackwardResult:
    params: dict[str, dict[str, np.ndarray]]
    input_grad: np.ndarray | None


def recomputable(g: Graph, name: str, _memo=None) -> bool:
    """Whether the output of ``name`` can be rebuilt from Norm saves alone."""
    memo = {} if _memo is None else _memo
    if name in memo:
        return memo[name]
    node = g[name]
    if node.kind == NodeKind.NORM:
        ok = True
    elif node.kind == NodeKind.INPUT or node.kind.learnt:
        ok = False
    else:
        ok = all(recomputable(g, i, memo) for i in node.inputs)
    memo[name] = ok
    return ok


def _learnt_forward(node, x):
    k = node.kind
    if k == NodeKind.IDENTITY:
        return x
    p = node.params
    if k == NodeKind.LINEAR:
        return tc.matmul(x.reshape(x.shape[0], -1), p["W"]) + p["bias"]
    a = node.attrs
    return tc.conv2d(x, p["W"], a.get("stride", 1), a.get("pad", 0)) + p["bias"].reshape(1, -1, 1, 1)


def _bshape(x):
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def forward(g: Graph, x, mode: str = "train", record: bool = True, fold: bool = False, scheme=None):
    """Run the graph. Returns (output, tape); the tape is None unless training with ``record``.

    ``scheme`` overrides every Norm node's own scheme for this call.  ``fold``
    (eval mode only) rolls each Norm into a learnt layer that feeds it directly.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    x = tc.as_tensor(x)
    tc.check_finite(x, "network input")
    train = mode == "train"
    record = record and train
    values: dict[str, np.ndarray] = {}
    entries: dict[str, TapeEntry] = {}
    memo: dict = {}
    folded: set[str] = set()
    succ = g.successors()
    position = {name: i for i, name in enumerate(g.nodes)}
    last_use = {name: max((position[c] for c in succ[name]), default=-1) for name in g.nodes}

    for node in g:
        k, name = node.kind, node.name
        ins = [values[i] for i in node.inputs]
        entry = TapeEntry(in_shapes=[v.shape for v in ins]) if record else None
        if k == NodeKind.INPUT:
            out = x
        elif k.learnt:
            if record and not recomputable(g, node.inputs[0], memo):
                entry.saved_input = ins[0]
            nxt = succ[name]
            if fold and not train and k != NodeKind.IDENTITY and len(nxt) == 1 and g[nxt[0]].kind == NodeKind.NORM:
                norm = g[nxt[0]]
                W, bias = fold_norm_into_learnt(node.params["W"], node.params["bias"], norm.running, default_eps(norm))
                shadow = type(node)(name, k, node.inputs, node.attrs, {"W": W, "bias": bias})
                out = _learnt_forward(shadow, ins[0])
                folded.add(norm.name)
            else:
                out = _learnt_forward(node, ins[0])
        elif k == NodeKind.NORM:
            s = qz.get_scheme(scheme) if scheme else node.scheme
            eps = default_eps(node)
            if name in folded:
                n = ins[0]
                out = qz.quantize_array(s, n, dtype=n.dtype)[1] if s else n
            elif train:
                n, stats = nc.normalize_forward(ins[0], eps)
                if s is not None:
                    codes, out = qz.quantize_array(s, n, dtype=n.dtype)
                    packed = qz.pack(s, codes)
                else:
                    out, packed = n, None
                if node.running is not None:
                    node.running.update(stats)
                if record:
                    entry.norm = nc.BNSavedState(stats, n.shape, n.dtype, packed, None if packed else n)
            else:
                n = nc.normalize_eval(ins[0], node.running, eps)
                out = qz.quantize_array(s, n, dtype=n.dtype)[1] if s else n
        elif k == NodeKind.AFFINE:
            p = node.params
            out = p["a"].reshape(_bshape(ins[0])) * ins[0] + p["b"].reshape(_bshape(ins[0]))
        elif k == NodeKind.RELU:
            out = np.maximum(ins[0], 0)
        elif k == NodeKind.BRANCH:
            out = ins[0]
        elif k == NodeKind.ADD:
            out = ins[0]
            for v in ins[1:]:
                out = out + v
        elif k == NodeKind.CONCAT:
            out = np.concatenate(ins, axis=1)
        elif k == NodeKind.AVGPOOL:
            a = node.attrs
            out = tc.avg_pool2d(ins[0], a["size"], a.get("stride", a["size"]), a.get("pad", 0))
        elif k == NodeKind.MAXPOOL:
            a = node.attrs
            out, idx = tc.max_pool2d(ins[0], a["size"], a.get("stride", a["size"]), a.get("pad", 0))
            if record:
                entry.indices = idx.astype(np.uint8 if a["size"] ** 2 <= 256 else np.uint16)
        else:
            raise GraphError(f"unknown node kind {k}")
        values[name] = out
        if record:
            entries[name] = entry
        for src in node.inputs:
            if last_use[src] <= position[name] and src != g.output_name:
                values.pop(src, None)

    out = tc.check_finite(values[g.output_name], "network output")
    tape = Tape(g.version, entries, x.dtype) if record else None
    return out, tape


class _Recompute:
    """Rebuilds forward values of star/affine/relu/norm nodes from the tape."""

    def __init__(self, g: Graph, tape: Tape):
        self.g, self.tape, self.cache = g, tape, {}

    def __call__(self, name: str) -> np.ndarray:
        if name in self.cache:
            return self.cache[name]
        node, entry = self.g[name], self.tape.entries[name]
        k = node.kind
        if k == NodeKind.NORM:
            out = entry.norm.values()
        elif k == NodeKind.AFFINE:
            v = self(node.inputs[0])
            out = node.params["a"].reshape(_bshape(v)) * v + node.params["b"].reshape(_bshape(v))
        elif k == NodeKind.RELU:
            out = np.maximum(self(node.inputs[0]), 0)
        elif k == NodeKind.BRANCH:
            out = self(node.inputs[0])
        elif k == NodeKind.ADD:
            out = self(node.inputs[0])
            for i in node.inputs[1:]:
                out = out + self(i)
        elif k == NodeKind.CONCAT:
            out = np.concatenate([self(i) for i in node.inputs], axis=1)
        elif k == NodeKind.AVGPOOL:
            a = node.attrs
            out = tc.avg_pool2d(self(node.inputs[0]), a["size"], a.get("stride", a["size"]), a.get("pad", 0))
        elif k == NodeKind.MAXPOOL:
            a = node.attrs
            out = tc.max_pool2d(self(node.inputs[0]), a["size"], a.get("stride", a["size"]), a.get("pad", 0))[0]
        else:
            raise GraphError(f"cannot recompute output of {k.value} node {name!r}")
        self.cache[name] = out
        return out

    def learnt_input(self, node) -> np.ndarray:
        entry = self.tape.entries[node.name]
        if entry.saved_input is not None:
            return entry.saved_input
        return self(node.inputs[0])


def _accumulate(grads: list[np.ndarray], partial_sums: bool) -> np.ndarray:
    if not partial_sums:
        total = grads[0]
        for gr in grads[1:]:
            total = total + gr
        return total
    total = qz.quantize_gradient(grads[0])
    for gr in grads[1:]:
        total = qz.quantize_gradient(total + gr)
    return total


def backward(g: Graph, tape: Tape, grad_output, grad_mode: str = "float") -> BackwardResult:
    """Reverse sweep. Returns parameter gradients keyed by node then parameter name."""
    if grad_mode not in GRAD_MODES:
        raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
    if tape is None:
        raise StaleTapeError("no tape: run forward in train mode first")
    if tape.version != g.version:
        raise StaleTapeError("tape was recorded before the last parameter update")
    quantize_in = grad_mode != "float"
    partial = grad_mode == "quantize_partial_sums"
    rc = _Recompute(g, tape)
    pending: dict[str, list[np.ndarray]] = {g.output_name: [np.asarray(grad_output, dtype=tape.dtype)]}
    params: dict[str, dict[str, np.ndarray]] = {}
    input_grad = None

    def send(src, grad):
        pending.setdefault(src, []).append(grad)

    for node in reversed(list(g)):
        incoming = pending.pop(node.name, None)
        if incoming is None:
            continue
        if node.kind == NodeKind.BRANCH:
            gy = _accumulate(incoming, partial)
        else:
            gy = incoming[0] if len(incoming) == 1 else _accumulate(incoming, False)
        k, entry = node.kind, tape.entries[node.name]
        if k == NodeKind.INPUT:
            input_grad = gy
        elif k == NodeKind.IDENTITY:
            send(node.inputs[0], qz.quantize_gradient(gy) if quantize_in else gy)
        elif k in (NodeKind.LINEAR, NodeKind.CONV):
            if quantize_in:
                gy = qz.quantize_gradient(gy).astype(tape.dtype, copy=False)
            x = rc.learnt_input(node)
            W = node.params["W"]
            if k == NodeKind.LINEAR:
                x2 = x.reshape(x.shape[0], -1)
                gW = tc.matmul(x2.T, gy)
                gx = tc.matmul(gy, W.T).reshape(x.shape)
                gb = gy.sum(axis=0)
            else:
                a = node.attrs
                gx, gW = tc.conv2d_backward(x, W, gy, a.get("stride", 1), a.get("pad", 0))
                gb = gy.sum(axis=(0, 2, 3))
            params[node.name] = {"W": gW, "bias": gb}
            send(node.inputs[0], gx)
        elif k == NodeKind.NORM:
            send(node.inputs[0], nc.norm_backward(entry.norm, gy))
        elif k == NodeKind.AFFINE:
            q = rc(node.inputs[0])
            axes = (0,) if q.ndim == 2 else (0, 2, 3)
            params[node.name] = {"a": (gy * q).sum(axis=axes), "b": gy.sum(axis=axes)}
            send(node.inputs[0], node.params["a"].reshape(_bshape(q)) * gy)
        elif k == NodeKind.RELU:
            send(node.inputs[0], np.where(rc(node.inputs[0]) > 0, gy, 0).astype(gy.dtype))
        elif k == NodeKind.BRANCH:
            send(node.inputs[0], gy)
        elif k == NodeKind.ADD:
            for src in node.inputs:
                send(src, gy)
        elif k == NodeKind.CONCAT:
            start = 0
            for src, shp in zip(node.inputs, entry.in_shapes):
                stop = start + shp[1]
                send(src, gy[:, start:stop])
                start = stop
        elif k == NodeKind.AVGPOOL:
            a = node.attrs
            send(node.inputs[0], tc.avg_pool2d_backward(gy, entry.in_shapes[0], a["size"], a.get("stride", a["size"]), a.get("pad", 0)))
        elif k == NodeKind.MAXPOOL:
            a = node.attrs
            send(node.inputs[0], tc.max_pool2d_backward(gy, entry.indices, entry.in_shapes[0], a["size"], a.get("stride", a["size"]), a.get("pad", 0)))
    return BackwardResult(params, input_grad)
