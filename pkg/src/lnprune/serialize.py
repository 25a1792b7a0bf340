"""On-disk model format.

Layout::

    b"LNPM" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | blob

All integers little-endian.  The manifest lists the layers in order with
their kinds, inputs, params and tensor shapes; the blob is every weight and
bias tensor as little-endian float32, concatenated in manifest order.  A
CRC-32 of the blob sits in the manifest so corruption is caught on load.
"""
import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import LnPruneError, ModelFormatError
from .graph import PARAM_KINDS, LayerSpec, ModelGraph

MAGIC = b"LNPM"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _manifest(graph):
    layers = []
    for l in graph.layers:
        entry = {"id": l.id, "kind": l.kind, "inputs": list(l.inputs), "params": l.params}
        if l.kind in PARAM_KINDS:
            entry["weights"] = list(l.weights.shape)
            entry["bias"] = list(l.bias.shape)
        entry["output_shape"] = list(graph.shapes[l.id][1:])
        layers.append(entry)
    return {
        "format": "lnpm",
        "input_shape": list(graph.input_shape),
        "layers": layers,
        "coupling_groups": [{"members": list(g.members), "stat_source": g.stat_source}
                            for g in graph.coupling_groups],
    }


def dumps(graph: ModelGraph) -> bytes:
    chunks = []
    for l in graph.layers:
        if l.kind in PARAM_KINDS:
            chunks.append(np.ascontiguousarray(l.weights, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(l.bias, dtype="<f4").tobytes())
    blob = b"".join(chunks)
    manifest = _manifest(graph)
    manifest["blob_bytes"] = len(blob)
    manifest["blob_crc32"] = zlib.crc32(blob)
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + blob


def loads(data: bytes) -> ModelGraph:
    if len(data) < _HEADER.size:
        raise ModelFormatError("model file truncated (header)")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise ModelFormatError("model file truncated (manifest)")
    try:
        manifest = json.loads(data[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from None
    blob = data[start + mlen:]
    if len(blob) != manifest.get("blob_bytes"):
        raise ModelFormatError(f"weight blob has {len(blob)} bytes, manifest says {manifest.get('blob_bytes')}")
    if zlib.crc32(blob) != manifest.get("blob_crc32"):
        raise ModelFormatError("weight blob checksum mismatch")
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=offset).astype(np.float32).reshape(shape)
        offset += n
        return arr

    layers = []
    try:
        for entry in manifest["layers"]:
            w = b = None
            if entry["kind"] in PARAM_KINDS:
                w = take(tuple(entry["weights"]))
                b = take(tuple(entry["bias"]))
            layers.append(LayerSpec(entry["id"], entry["kind"], tuple(entry["inputs"]), dict(entry["params"]), w, b))
        graph = ModelGraph(manifest["input_shape"], layers)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid manifest: {exc}") from None
    except LnPruneError as exc:
        raise ModelFormatError(f"manifest describes an invalid graph: {exc}") from None
    return graph


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` through a temp file + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(graph: ModelGraph, path):
    data = dumps(graph)
    atomic_write(path, data)
    return len(data)


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return loads(fh.read())


def model_bytes(graph: ModelGraph) -> int:
    return len(dumps(graph))
