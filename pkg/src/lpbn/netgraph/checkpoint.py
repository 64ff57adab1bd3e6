"""Checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive (no pickled objects) with:

``__format__``      uint8 JSON ``{"format": "lpbn-checkpoint", "version": 1}``
``__graph__``       uint8 JSON topology, the same document ``Graph.to_json`` writes;
                    Norm nodes carry their scheme id (or null for fp32)
``param/<node>/<name>``     parameter arrays
``running/<node>/mean|var`` running statistics of Norm nodes
"""
from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile

import numpy as np

from ..normcore import RunningStats
from .graph import Graph, GraphError, NodeKind

FORMAT = {"format": "lpbn-checkpoint", "version": 1}


def _text(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8)).decode("utf-8")


def _blob(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def checkpoint_bytes(g: Graph) -> bytes:
    arrays = {"__format__": _blob(json.dumps(FORMAT)), "__graph__": _blob(g.to_json())}
    for node in g:
        for pname, value in node.params.items():
            arrays[f"param/{node.name}/{pname}"] = value
        if node.running is not None and node.running.populated:
            arrays[f"running/{node.name}/mean"] = np.asarray(node.running.mean)
            arrays[f"running/{node.name}/var"] = np.asarray(node.running.var)
    buf = io.BytesIO()
    # fixed member timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for key, value in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def save_checkpoint(path, g: Graph):
    data = checkpoint_bytes(g)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Graph:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise GraphError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "__format__" not in archive.files or json.loads(_text(archive["__format__"])) != FORMAT:
            raise GraphError(f"{path} is not an lpbn checkpoint")
        g = Graph.from_json(_text(archive["__graph__"]))
        for node in g:
            prefix = f"param/{node.name}/"
            node.params = {k[len(prefix):]: archive[k] for k in archive.files if k.startswith(prefix)}
            if node.kind == NodeKind.NORM:
                node.running = RunningStats(momentum=node.attrs.get("momentum", 0.1))
                if f"running/{node.name}/mean" in archive.files:
                    node.running.mean = archive[f"running/{node.name}/mean"]
                    node.running.var = archive[f"running/{node.name}/var"]
        shapes = g.infer_shapes()
        for node in g:
            if node.kind in (NodeKind.LINEAR, NodeKind.CONV) and "W" not in node.params:
                raise GraphError(f"checkpoint lacks weights for {node.name!r}")
            if node.kind == NodeKind.AFFINE and node.params["a"].shape != (shapes[node.name][0],):
                raise GraphError(f"affine parameters of {node.name!r} do not match the graph")
    g.bump()
    return g
