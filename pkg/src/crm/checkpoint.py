"""Parameter checkpoints.

Layout: the magic line ``CRMCKPT\\n``, an 8-byte little-endian header length,
a JSON header, then every array's row-major float64 values (little-endian)
back to back. The header lists ``name``, ``shape`` and ``offset`` per array
plus ``format_version`` and free-form ``meta``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from crm.optim import AdamState
from crm.tensor import Tensor

MAGIC = b"CRMCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:pos + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: bad header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    body = raw[pos + hlen:]
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start, end = e["offset"], e["offset"] + 8 * n
        if end > len(body):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(body[start:end], dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, header["meta"]


def save_params(path, params, meta=None, adam=None) -> None:
    """Write named parameter tensors, plus Adam moments when ``adam`` is given."""
    arrays = {n: p.data for n, p in params.items()}
    meta = dict(meta or {})
    if adam is not None:
        for n in params:
            if n in adam.m:
                arrays[f"adam.m/{n}"] = adam.m[n]
                arrays[f"adam.v/{n}"] = adam.v[n]
        meta["adam"] = {
            "step": adam.step,
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
        }
    save_arrays(path, arrays, meta)


def load_params(path) -> tuple[dict[str, Tensor], dict, AdamState | None]:
    """Inverse of :func:`save_params`: ``(params, meta, adam_or_None)``."""
    arrays, meta = load_arrays(path)
    params = {
        n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in arrays.items() if not n.startswith("adam.")
    }
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(
            learning_rate=a["learning_rate"], beta1=a["beta1"], beta2=a["beta2"], epsilon=a["epsilon"], step=a["step"]
        )
        for n in params:
            if f"adam.m/{n}" in arrays:
                adam.m[n] = arrays[f"adam.m/{n}"].copy()
                adam.v[n] = arrays[f"adam.v/{n}"].copy()
    return params, meta, adam
