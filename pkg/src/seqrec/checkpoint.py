"""Versioned checkpoint container.

Layout::

    SEQREC-CKPT <version>\\n
    <header length in bytes>\\n
    <JSON header, sorted keys>
    <array payloads, little-endian, in header order>

The bytes depend only on the arrays and metadata, so two identical models
always serialize identically (``np.savez`` stamps zip entries with wall-clock
times, which rules it out).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"SEQREC-CKPT"
VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, arrays: dict, meta: dict, vocab_hash: str) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dtype = "float64"
        elif arr.dtype.kind in "iub":
            dtype = "int64"
        else:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "vocab_hash": vocab_hash, "meta": meta, "arrays": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC + f" {VERSION}\n".encode())
        fh.write(f"{len(header)}\n".encode())
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path, kind: str | None = None, vocab_hash: str | None = None):
    """Read a container back as ``(arrays, meta)``.

    Raises :class:`CheckpointError` on a wrong kind, a vocabulary hash that
    differs from ``vocab_hash``, or a truncated/corrupt file.
    """
    data = Path(path).read_bytes()
    first, _, rest = data.partition(b"\n")
    magic, _, version = first.partition(b" ")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(version) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {int(version)}")
    size_line, _, rest = rest.partition(b"\n")
    size = int(size_line)
    header = json.loads(rest[:size].decode("utf-8"))
    body = rest[size:]
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash {header['vocab_hash']} does not match the prepared data ({vocab_hash})"
        )
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']!r}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64 if e["dtype"] == "float64" else np.int64)
    meta = dict(header["meta"])
    meta["vocab_hash"] = header["vocab_hash"]
    return arrays, meta
