"""Structural check that every path between learnt layers reads (*)* N A ReLU (*)*."""
from __future__ import annotations

from dataclasses import dataclass, field

from .graph import Graph, GraphError, NodeKind

# automaton states along a segment that started at a learnt node (or the input)
_LEAD, _N, _A, _TAIL = 0, 1, 2, 3
_EXPECT = {_LEAD: "norm", _N: "affine", _A: "relu", _TAIL: "a learnt layer or a branch/add/concat/pool node"}


@dataclass
class CromulenceReport:
    ok: bool
    violations: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _step(state: int, kind: NodeKind):
    """Next state, or None when ``kind`` cannot appear in ``state``."""
    if kind.star:
        return state if state in (_LEAD, _TAIL) else None
    if kind == NodeKind.NORM:
        return _N if state == _LEAD else None
    if kind == NodeKind.AFFINE:
        return _A if state == _N else None
    if kind == NodeKind.RELU:
        return _TAIL if state == _A else None
    return None


def _describe(kind: NodeKind, state: int) -> str:
    if kind == NodeKind.RELU:
        return "relu without a preceding norm-affine pair"
    if kind == NodeKind.AFFINE:
        return "affine not directly after a norm"
    if kind == NodeKind.NORM:
        return "norm inside an open norm-affine-relu run"
    if kind.star:
        return f"{kind.value} interrupts the norm-affine-relu run"
    return f"expected {_EXPECT[state]}"


def validate_cromulent(g: Graph) -> CromulenceReport:
    g.check_structure()
    succ = g.successors()
    violations: list[str] = []
    visited: set[tuple[str, int, bool]] = set()

    def walk(node_name: str, state: int, from_input: bool, path: list[str]):
        key = (node_name, state, from_input)
        if key in visited:
            return
        visited.add(key)
        for nxt in succ[node_name]:
            kind = g[nxt].kind
            trail = path + [nxt]
            if kind.learnt:
                if state == _TAIL or (from_input and state == _LEAD):
                    walk(nxt, _LEAD, False, [nxt])
                else:
                    violations.append(
                        f"path {' -> '.join(trail)}: learnt layer {nxt!r} reached before "
                        f"norm-affine-relu completed (expected {_EXPECT[state]})"
                    )
                continue
            new = _step(state, kind)
            if new is None:
                violations.append(f"path {' -> '.join(trail)}: {_describe(kind, state)}")
                continue
            walk(nxt, new, from_input, trail)
        if not succ[node_name] and state not in (_LEAD,) and not g[node_name].kind.learnt:
            violations.append(f"path {' -> '.join(path)}: ends inside a norm-affine-relu run")

    walk(g.input_name, _LEAD, True, [g.input_name])
    # de-duplicate while keeping discovery order
    seen, unique = set(), []
    for v in violations:
        if v not in seen:
            seen.add(v)
            unique.append(v)
    return CromulenceReport(not unique, unique)


def require_cromulent(g: Graph):
    report = validate_cromulent(g)
    if not report.ok:
        raise GraphError("graph is not cromulent:\n  " + "\n  ".join(report.violations))
    return report
