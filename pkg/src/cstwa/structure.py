"""User-user / item-item similarity graphs mined from a pretrained embedding table, and propagation over them."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, ShapeError
from .features import EmbeddingTable, RowTable

log = logging.getLogger(__name__)

MAX_EXACT_NODES = 100_000


@dataclass(frozen=True)
class StructureConfig:
    K: int = 8
    L: int = 1
    alpha: float = 0.3

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.L < 0:
            raise ConfigError(f"L must be >= 0, got {self.L}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


class RepMatrix(RowTable):
    """Per-entity representation rows (one row per user or item), trainable row-wise."""

    def __init__(self, entity_kind: str, values: np.ndarray):
        if entity_kind not in ("user", "item"):
            raise ConfigError(f"entity kind must be 'user' or 'item', got {entity_kind!r}")
        self.entity_kind = entity_kind
        super().__init__(values)

    def copy(self) -> "RepMatrix":
        r = RepMatrix(self.entity_kind, self.values.copy())
        r.m, r.v, r.step = self.m.copy(), self.v.copy(), self.step.copy()
        return r


@dataclass
class SparseGraph:
    """CSR adjacency. Column indices increase within each row; no self edges."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    weight: np.ndarray
    normalized: bool = False
    K: int = 0

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weight, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def __eq__(self, other) -> bool:
        return (isinstance(other, SparseGraph) and self.n == other.n and self.normalized == other.normalized
                and self.K == other.K and np.array_equal(self.row_ptr, other.row_ptr)
                and np.array_equal(self.col_idx, other.col_idx) and np.array_equal(self.weight, other.weight))

    @classmethod
    def from_dense(cls, a: np.ndarray, normalized: bool = False, K: int = 0) -> "SparseGraph":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"adjacency must be square, got {a.shape}")
        if np.any(np.diag(a) != 0):
            raise DataError("self edges are not allowed")
        m = sp.csr_matrix(a)
        m.sort_indices()
        return cls(a.shape[0], m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data.copy(), normalized, K)


def assemble_reps(table: EmbeddingTable, entity_kind: str, feature_rows: np.ndarray) -> RepMatrix:
    """Row ``e`` is the concatenation of the embedding rows listed in ``feature_rows[e]`` (global row ids)."""
    feature_rows = np.asarray(feature_rows, dtype=np.int64)
    if feature_rows.ndim != 2:
        raise ShapeError(f"feature map must be (n_entities, n_fields), got {feature_rows.shape}")
    bad = np.flatnonzero(np.any((feature_rows < 0) | (feature_rows >= table.n), axis=1))
    if bad.size:
        raise DataError(f"{entity_kind} entity {int(bad[0])} has a missing or invalid feature tuple")
    vals = table.values[feature_rows].reshape(len(feature_rows), -1).copy()
    return RepMatrix(entity_kind, vals)


def topk_similarity_graph(reps: np.ndarray | RepMatrix, K: int, block_size: int = 1024) -> SparseGraph:
    """Exact top-K cosine neighbours per row, keeping only strictly positive similarities.

    Ties on the K-th score go to the smaller column index. Zero-norm rows get no edges
    and never appear as neighbours.
    """
    x = reps.values if isinstance(reps, RepMatrix) else np.asarray(reps)
    x = x.astype(np.float64)
    n = len(x)
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("%d rows have zero norm; cosine undefined, they get no edges", int(zero.sum()))
    xn = np.divide(x, norms[:, None], out=np.zeros_like(x), where=~zero[:, None])
    k = min(K, n - 1)
    rows_out, cols_out, w_out = [], [], []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        s = xn[start:stop] @ xn.T
        np.clip(s, 0.0, 1.0, out=s)
        s[np.arange(stop - start), np.arange(start, stop)] = 0.0
        if k < 1:
            continue
        kth = -np.partition(-s, k - 1, axis=1)[:, k - 1]
        gt = s > kth[:, None]
        eq = s == kth[:, None]
        room = k - gt.sum(axis=1)
        keep = gt | (eq & (np.cumsum(eq, axis=1) <= room[:, None]))
        keep &= s > 0.0
        r, c = np.nonzero(keep)
        rows_out.append(r + start)
        cols_out.append(c)
        w_out.append(s[r, c])
    rows = np.concatenate(rows_out) if rows_out else np.zeros(0, np.int64)
    cols = np.concatenate(cols_out) if cols_out else np.zeros(0, np.int64)
    w = np.concatenate(w_out) if w_out else np.zeros(0)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
    return SparseGraph(n, row_ptr, cols.astype(np.int64), w.astype(np.float64), False, K)


def normalize_graph(g: SparseGraph) -> SparseGraph:
    """Symmetric degree normalisation ``w_ij / sqrt(deg_i * deg_j)`` with row-sum degrees.

    Edges touching a zero-degree endpoint are dropped.
    """
    if g.normalized:
        raise ConfigError("graph is already normalized")
    if np.any(g.weight < 0):
        raise DataError("graph weights must be nonnegative")
    rows = np.repeat(np.arange(g.n), g.row_nnz())
    deg = np.bincount(rows, weights=g.weight, minlength=g.n)
    di, dj = deg[rows], deg[g.col_idx]
    keep = (di > 0) & (dj > 0)
    w = g.weight[keep] / np.sqrt(di[keep] * dj[keep])
    rows = rows[keep]
    row_ptr = np.zeros(g.n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=g.n), out=row_ptr[1:])
    return SparseGraph(g.n, row_ptr, g.col_idx[keep].copy(), w, True, g.K)


def propagate(g: SparseGraph, r: np.ndarray, L: int) -> np.ndarray:
    """Apply ``r <- G r`` ``L`` times (no transform, no activation)."""
    r = np.asarray(r)
    if r.ndim != 2 or r.shape[0] != g.n:
        raise ShapeError(f"propagate: graph has {g.n} nodes, representation is {r.shape}")
    if not g.normalized:
        raise ConfigError("propagate expects a normalized graph")
    if L < 0:
        raise ConfigError(f"L must be >= 0, got {L}")
    m = g.to_scipy()
    out = r
    for _ in range(L):
        out = np.asarray(m @ out)
    return out.astype(r.dtype, copy=L == 0)


def ema_blend(fresh: np.ndarray, prev: np.ndarray, alpha: float) -> np.ndarray:
    fresh, prev = np.asarray(fresh), np.asarray(prev)
    if fresh.shape != prev.shape:
        raise ShapeError(f"ema_blend: {fresh.shape} vs {prev.shape}")
    return alpha * fresh + (1.0 - alpha) * prev


def epoch_refresh(r: RepMatrix, g: SparseGraph, cfg: StructureConfig) -> None:
    """In-place ``R <- alpha * G^L R + (1 - alpha) * R``. Adam moments are left alone."""
    fresh = propagate(g, r.values, cfg.L)
    r.values[...] = ema_blend(fresh, r.values, cfg.alpha)


def graph_stats(g: SparseGraph) -> dict:
    deg = g.row_nnz()
    return {"nodes": g.n, "nnz": g.nnz, "mean_degree": float(deg.mean()) if g.n else 0.0,
            "max_degree": int(deg.max()) if g.n else 0, "normalized": g.normalized, "K": g.K}
