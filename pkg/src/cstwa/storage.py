"""Deterministic binary container for named arrays plus a JSON header.

Layout (all integers little-endian)::

    8 bytes   magic  b"CSTWABIN"
    4 bytes   uint32 format version (currently 1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON, keys sorted: {"kind", "meta", "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    ...       raw C-order little-endian array bytes; "offset" counts from the end of the header

Graph caches use kind "graph" with meta {n, K, nnz, normalized} and arrays
``row_ptr`` (int64), ``col_idx`` (int64), ``weight`` (float64).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .structure import SparseGraph

MAGIC = b"CSTWABIN"
VERSION = 1


def save_arrays(path: str | Path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_arrays(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if buf[:8] != MAGIC:
        raise DataError(f"{path}: not a cstwa binary file")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    header = json.loads(buf[20:20 + hlen])
    if kind is not None and header["kind"] != kind:
        raise DataError(f"{path}: expected a {kind!r} file, found {header['kind']!r}")
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        a = np.frombuffer(buf[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = a.reshape(e["shape"]).astype(a.dtype.newbyteorder("="))
    return arrays, header["meta"]


def save_graph(g: SparseGraph, path: str | Path) -> None:
    meta = {"n": g.n, "K": g.K, "nnz": g.nnz, "normalized": g.normalized}
    save_arrays(path, "graph", {"row_ptr": g.row_ptr.astype(np.int64), "col_idx": g.col_idx.astype(np.int64),
                                "weight": g.weight.astype(np.float64)}, meta)


def load_graph(path: str | Path) -> SparseGraph:
    arrays, meta = load_arrays(path, "graph")
    g = SparseGraph(int(meta["n"]), arrays["row_ptr"], arrays["col_idx"], arrays["weight"],
                    bool(meta["normalized"]), int(meta["K"]))
    if g.nnz != meta["nnz"] or len(g.row_ptr) != g.n + 1:
        raise DataError(f"{path}: graph header disagrees with its arrays")
    return g
