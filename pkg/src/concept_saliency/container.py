"""Manifest + raw float payload container.

A container is a directory holding two files:

``manifest.json``
    UTF-8 JSON object. Arbitrary metadata plus an ``"arrays"`` list whose
    entries are ``{"name", "shape", "dtype", "offset", "nbytes"}``.
``payload.bin``
    The arrays concatenated in manifest order, little-endian, no padding.

Model checkpoints, concept vectors, datasets and raw saliency maps all use
this layout. Floating arrays are stored as ``<f4`` unless the caller passes
64-bit data; integer arrays keep their integer dtype. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContainerError

MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"
FORMAT = "concept-saliency-container/1"


def _le(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f" and arr.dtype.itemsize not in (4, 8):
        arr = arr.astype(np.float32)
    if arr.dtype.kind == "b":
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_container(path, manifest: dict, arrays: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / PAYLOAD, "wb") as fh:
        for name, arr in arrays.items():
            arr = _le(arr)
            raw = arr.tobytes(order="C")
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            })
            fh.write(raw)
            offset += len(raw)
    doc = dict(manifest)
    doc["format"] = FORMAT
    doc["arrays"] = entries
    doc["payload_bytes"] = offset
    (path / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_container(path) -> tuple[dict, dict]:
    path = Path(path)
    mpath, ppath = path / MANIFEST, path / PAYLOAD
    if not mpath.exists() or not ppath.exists():
        raise FileNotFoundError(f"{path} is not a container (need {MANIFEST} and {PAYLOAD})")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{mpath}: invalid JSON manifest ({exc})") from None
    if doc.get("format") != FORMAT:
        raise ContainerError(f"{mpath}: unknown container format {doc.get('format')!r}")
    blob = ppath.read_bytes()
    expected = doc.get("payload_bytes")
    if expected is None or len(blob) != expected:
        raise ContainerError(
            f"{ppath}: payload size mismatch, manifest says {expected} bytes, file has {len(blob)}"
        )
    arrays = {}
    for ent in doc["arrays"]:
        dtype = np.dtype(ent["dtype"])
        count = int(np.prod(ent["shape"], dtype=np.int64))
        if count * dtype.itemsize != ent["nbytes"] or ent["offset"] + ent["nbytes"] > len(blob):
            raise ContainerError(f"{path}: array {ent['name']!r} size mismatch")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=ent["offset"])
        arrays[ent["name"]] = arr.reshape(ent["shape"]).astype(dtype.newbyteorder("="))
    return doc, arrays
