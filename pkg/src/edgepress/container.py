"""Binary containers.

``.epm`` model layout (all integers little-endian)::

    b"EPM1" | u32 header_len | header (UTF-8 JSON) | weight blob | u32 CRC32

``.ept`` tensor layout is the same with magic ``b"EPT1"`` and a header of
``{"dtype", "shape"}`` followed by the raw payload. The CRC covers every
byte before it.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from edgepress.graph import DTYPES, GraphError, ModelGraph, Node, TensorSpec, validate
from edgepress.qparams import QuantParams

MODEL_MAGIC = b"EPM1"
TENSOR_MAGIC = b"EPT1"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    def __init__(self, message: str, offset: int | None = None, node_id: str | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
        self.node_id = node_id


def _dumps(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _frame(magic: bytes, header: dict, blob: bytes) -> bytes:
    head = _dumps(header)
    body = magic + struct.pack("<I", len(head)) + head + blob
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unframe(data: bytes, magic: bytes) -> tuple[dict, bytes, int]:
    if len(data) < 12:
        raise ContainerError("file too short for container", 0)
    if data[:4] != magic:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {magic!r}", 0)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("checksum mismatch", len(data) - 4)
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(body):
        raise ContainerError("malformed header: length exceeds file", 4)
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"malformed header: {e}", 8)
    if not isinstance(header, dict):
        raise ContainerError("malformed header: not an object", 8)
    blob_start = 8 + hlen
    return header, body[blob_start:], blob_start


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def serialize_model(g: ModelGraph) -> bytes:
    blob = bytearray()
    consts = []
    for tid in sorted(g.constants):
        arr = np.ascontiguousarray(g.constants[tid])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        consts.append({
            "id": tid, "dtype": _dtype_key(arr.dtype), "shape": list(arr.shape),
            "offset": len(blob), "nbytes": len(raw),
        })
        blob += raw
    header = {
        "format": "EPM1",
        "version": FORMAT_VERSION,
        "metadata": g.metadata,
        "graph_inputs": g.graph_inputs,
        "graph_outputs": g.graph_outputs,
        "tensors": [
            {"id": t.id, "dtype": t.dtype, "shape": list(t.shape), "producer": t.producer}
            for t in g.tensors.values()
        ],
        "nodes": [
            {
                "id": n.id, "op_kind": n.op_kind, "inputs": n.inputs, "outputs": n.outputs,
                "attrs": n.attrs, "tags": n.tags,
                "qparams": n.qparams.to_dict() if n.qparams is not None else None,
            }
            for n in g.nodes
        ],
        "constants": consts,
    }
    return _frame(MODEL_MAGIC, header, bytes(blob))


def _dtype_key(dt: np.dtype) -> str:
    for name, t in DTYPES.items():
        if np.dtype(t) == dt:
            return name
    raise ContainerError(f"unsupported dtype {dt}")


def deserialize_model(data: bytes) -> ModelGraph:
    header, blob, blob_start = _unframe(data, MODEL_MAGIC)
    try:
        constants: dict[str, np.ndarray] = {}
        for c in header["constants"]:
            if c["dtype"] not in DTYPES:
                raise ContainerError(f"unknown constant dtype {c['dtype']!r} for {c['id']!r}", 8)
            off, n = int(c["offset"]), int(c["nbytes"])
            if off < 0 or off + n > len(blob):
                raise ContainerError(f"constant {c['id']!r} exceeds weight blob", blob_start + off)
            dt = np.dtype(DTYPES[c["dtype"]]).newbyteorder("<")
            arr = np.frombuffer(blob[off:off + n], dtype=dt).astype(DTYPES[c["dtype"]])
            constants[c["id"]] = arr.reshape(c["shape"])
        nodes = []
        for nd in header["nodes"]:
            qp = QuantParams.from_dict(nd["qparams"]) if nd.get("qparams") else None
            nodes.append(Node(
                id=nd["id"], op_kind=nd["op_kind"], inputs=list(nd["inputs"]),
                outputs=list(nd["outputs"]), attrs=dict(nd.get("attrs") or {}),
                tags=list(nd.get("tags") or []), qparams=qp,
            ))
        tensors = {
            t["id"]: TensorSpec(t["id"], t["dtype"], tuple(int(v) for v in t["shape"]), t["producer"])
            for t in header["tensors"]
        }
        g = ModelGraph(
            nodes=nodes, tensors=tensors, constants=constants,
            graph_inputs=list(header["graph_inputs"]), graph_outputs=list(header["graph_outputs"]),
            metadata=dict(header.get("metadata") or {}),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ContainerError):
            raise
        raise ContainerError(f"malformed header: {e}", 8)
    report = validate(g)
    if not report.ok:
        issue = report.issues[0]
        node_id = next((n.id for n in g.nodes if f"node {n.id}" in issue), None)
        raise ContainerError(issue, node_id=node_id)
    return g


def save_model(g: ModelGraph, path: str | os.PathLike) -> None:
    report = validate(g)
    if not report.ok:
        raise GraphError(f"refusing to save invalid graph: {report.issues[0]}")
    atomic_write(path, serialize_model(g))


def load_model(path: str | os.PathLike) -> ModelGraph:
    return deserialize_model(Path(path).read_bytes())


def serialize_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    header = {"dtype": _dtype_key(arr.dtype), "shape": list(arr.shape)}
    return _frame(TENSOR_MAGIC, header, arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def deserialize_tensor(data: bytes) -> np.ndarray:
    header, blob, _ = _unframe(data, TENSOR_MAGIC)
    try:
        dt = np.dtype(DTYPES[header["dtype"]])
        shape = [int(v) for v in header["shape"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ContainerError(f"malformed tensor header: {e}", 8)
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(blob) != expected:
        raise ContainerError(f"payload is {len(blob)} bytes, expected {expected}", 8)
    return np.frombuffer(blob, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)


def save_tensor(arr: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write(path, serialize_tensor(arr))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    return deserialize_tensor(Path(path).read_bytes())


def load_tensor_dir(directory: str | os.PathLike) -> list[np.ndarray]:
    """All ``.ept`` files of a directory in filename order."""
    return [load_tensor(p) for p in sorted(Path(directory).glob("*.ept"))]
