"""Model documents: JSON with base64 little-endian float64 arrays.

The same document shape is used on disk (``shared-gen-<g>.model``) and inside
protocol messages. Encoding is canonical (sorted keys, no whitespace), so
serialize -> deserialize -> serialize is byte-identical.
"""
from __future__ import annotations

import base64
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..nn import NetworkParameters

MODEL_FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "<f8":
        raise FormatError(f"unsupported array dtype {d.get('dtype')!r}")
    shape = tuple(int(s) for s in d["shape"])
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != 8 * count:
        raise FormatError(f"array payload has {len(raw)} bytes, shape {shape} needs {8 * count}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def model_to_doc(params: NetworkParameters, **meta) -> dict:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "model",
        "layer_dims": list(params.layer_dims),
        "activation": params.activation,
        "layers": [{"weight": _encode_array(w), "bias": _encode_array(b)}
                   for w, b in zip(params.weights, params.biases)],
        "checksum": params.checksum(),
    }
    for k, v in meta.items():
        if v is not None:
            doc[k] = v
    return doc


def doc_to_model(doc: dict) -> NetworkParameters:
    if not isinstance(doc, dict):
        raise FormatError("model document must be an object")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {doc.get('format_version')!r}")
    if doc.get("kind") != "model":
        raise FormatError(f"not a model document: kind={doc.get('kind')!r}")
    try:
        params = NetworkParameters(
            doc["layer_dims"],
            [_decode_array(layer["weight"]) for layer in doc["layers"]],
            [_decode_array(layer["bias"]) for layer in doc["layers"]],
            doc.get("activation", "relu"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed model document: {exc}") from exc
    if "checksum" in doc and doc["checksum"] != params.checksum():
        raise FormatError("model checksum mismatch")
    return params


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def dumps_model(params: NetworkParameters, **meta) -> bytes:
    return canonical_json(model_to_doc(params, **meta))


def loads_model(data: bytes | str) -> NetworkParameters:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc}") from exc
    return doc_to_model(doc)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(params: NetworkParameters, path, **meta) -> None:
    atomic_write(path, dumps_model(params, **meta))


def load_model(path) -> NetworkParameters:
    return loads_model(Path(path).read_bytes())
