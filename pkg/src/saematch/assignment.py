"""Feature-pair cost matrices and exact linear assignment.

The dense solver is a shortest-augmenting-path method with dual potentials
(Jonker-Volgenant style, one Dijkstra search per row). Column scans run in
ascending index order and ties prefer an unassigned column, then the lowest
index, so results are reproducible.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np
from numba import njit, prange

from .errors import (
    DimensionError,
    DomainError,
    FoldStateError,
    SizeError,
)
from .sae_model import SaeParams

MAX_EXACT_SIZE = 10


class WeightSet(str, Enum):
    DECODER_ONLY = "decoder_only"
    ENCODER_ONLY = "encoder_only"
    ENCODER_DECODER_BIAS = "encoder_decoder_bias"

    @classmethod
    def parse(cls, value) -> "WeightSet":
        if isinstance(value, cls):
            return value
        aliases = {"dec": cls.DECODER_ONLY, "enc": cls.ENCODER_ONLY,
                   "enc-dec-bias": cls.ENCODER_DECODER_BIAS}
        if value in aliases:
            return aliases[value]
        return cls(value)


@dataclass(frozen=True)
class GroupWeights:
    """Multipliers applied to each weight group's squared distance."""

    decoder: float = 1.0
    encoder: float = 1.0
    bias: float = 1.0


@dataclass(frozen=True, eq=False)
class CostMatrix:
    data: np.ndarray
    source_layer: int = 0
    target_layer: int = 1
    weight_set: WeightSet = WeightSet.ENCODER_DECODER_BIAS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise DimensionError(f"cost matrix must be square, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class Permutation:
    """Bijection of feature indices: source feature i maps to target ``map[i]``."""

    map: np.ndarray
    from_layer: int = 0
    to_layer: int = 1
    provenance: str = "exact"

    def __post_init__(self):
        m = np.array(self.map, dtype=np.int64)
        if m.ndim != 1 or m.size < 1:
            raise DimensionError(f"permutation map must be a non-empty vector, got {m.shape}")
        if not np.array_equal(np.sort(m), np.arange(m.size)):
            raise DomainError("permutation map is not a bijection on [0, F)")
        if self.provenance not in ("exact", "composed"):
            raise DomainError(f"unknown provenance {self.provenance!r}")
        m.setflags(write=False)
        object.__setattr__(self, "map", m)
        object.__setattr__(self, "from_layer", int(self.from_layer))
        object.__setattr__(self, "to_layer", int(self.to_layer))

    def __len__(self) -> int:
        return self.map.size

    @classmethod
    def identity(cls, n: int, from_layer: int = 0, to_layer: int = 1) -> "Permutation":
        return cls(np.arange(n), from_layer, to_layer)

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.map.size)
        return Permutation(inv, self.to_layer, self.from_layer, self.provenance)

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Move values along the last axis from source to target indexing."""
        f = np.asarray(f)
        out = np.zeros_like(f)
        out[..., self.map] = f
        return out

    def same_map(self, other: "Permutation") -> bool:
        return np.array_equal(self.map, other.map)


# -- cost matrix ------------------------------------------------------------------

@njit(parallel=True, cache=True)
def _weighted_sq_dist(a, b, w, out, block):
    n, dim = a.shape
    m = b.shape[0]
    n_blocks = (n + block - 1) // block
    for bi in prange(n_blocks):
        i0 = bi * block
        i1 = min(i0 + block, n)
        for j in range(m):
            for i in range(i0, i1):
                acc = 0.0
                for k in range(dim):
                    t = a[i, k] - b[j, k]
                    acc += w[k] * (t * t)
                out[i, j] = acc


def feature_vectors(sae: SaeParams, weight_set=WeightSet.ENCODER_DECODER_BIAS,
                    weights: GroupWeights = GroupWeights()) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature vectors (F, D) and per-column multipliers (D,) for a weight set.

    Columns are ordered decoder column, encoder row, encoder bias.
    """
    ws = WeightSet.parse(weight_set)
    blocks, mults = [], []
    if ws in (WeightSet.DECODER_ONLY, WeightSet.ENCODER_DECODER_BIAS):
        blocks.append(sae.w_dec.T)
        mults.append(np.full(sae.d_model, weights.decoder))
    if ws in (WeightSet.ENCODER_ONLY, WeightSet.ENCODER_DECODER_BIAS):
        blocks.append(sae.w_enc)
        mults.append(np.full(sae.d_model, weights.encoder))
    if ws is WeightSet.ENCODER_DECODER_BIAS:
        blocks.append(sae.b_enc[:, None])
        mults.append(np.array([weights.bias]))
    return np.ascontiguousarray(np.hstack(blocks)), np.concatenate(mults)


def _thread_count(threads: int | None) -> int:
    pool = numba.config.NUMBA_NUM_THREADS
    if threads is None:
        return max(1, min(pool, os.cpu_count() or 1))
    if threads < 1:
        raise DomainError(f"threads must be >= 1, got {threads}")
    return min(threads, pool)


def pairwise_sq_distances(a: np.ndarray, b: np.ndarray, col_weights=None, *,
                          threads: int | None = None, dtype=np.float64,
                          block: int = 16) -> np.ndarray:
    """``out[i, j] = sum_k w[k] (a[i, k] - b[j, k])**2``, accumulated in float64.

    Each entry is reduced in a fixed order, so the result is identical for any
    thread count. ``dtype=np.float32`` halves storage for very wide SAEs.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")
    if col_weights is None:
        col_weights = np.ones(a.shape[1])
    w = np.ascontiguousarray(col_weights, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=dtype)
    prev = numba.get_num_threads()
    numba.set_num_threads(_thread_count(threads))
    try:
        _weighted_sq_dist(a, b, w, out, block)
    finally:
        numba.set_num_threads(prev)
    return out


def build_cost_matrix(a: SaeParams, b: SaeParams,
                      weight_set=WeightSet.ENCODER_DECODER_BIAS, *,
                      weights: GroupWeights = GroupWeights(),
                      allow_unfolded: bool = False,
                      threads: int | None = None,
                      dtype=np.float64) -> CostMatrix:
    """Sum of squared distances between every feature of ``a`` and every feature of ``b``.

    The decoder bias is never included: it is shared by all features.
    """
    if not allow_unfolded and not (a.folded and b.folded):
        raise FoldStateError("cost matrix requires folded SAEs (pass allow_unfolded=True to override)")
    if a.w_enc.shape != b.w_enc.shape:
        raise DimensionError(f"SAE shapes differ: {a.w_enc.shape} vs {b.w_enc.shape}")
    ws = WeightSet.parse(weight_set)
    va, w = feature_vectors(a, ws, weights)
    vb, _ = feature_vectors(b, ws, weights)
    data = pairwise_sq_distances(va, vb, w, threads=threads, dtype=dtype)
    return CostMatrix(data, a.layer_id, b.layer_id, ws)


# -- solvers -------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _sap_solve(cost):
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    shortest = np.empty(n)
    path = np.empty(n, dtype=np.int64)
    visited_rows = np.zeros(n, dtype=np.bool_)
    visited_cols = np.zeros(n, dtype=np.bool_)

    for cur_row in range(n):
        shortest[:] = np.inf
        path[:] = -1
        visited_rows[:] = False
        visited_cols[:] = False
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            visited_rows[i] = True
            lowest = np.inf
            best = -1
            best_free = False
            for j in range(n):
                if visited_cols[j]:
                    continue
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                s = shortest[j]
                free = row4col[j] == -1
                if s < lowest or (s == lowest and free and not best_free):
                    lowest = s
                    best = j
                    best_free = free
            if best == -1 or lowest == np.inf:
                return col4row, False
            min_val = lowest
            visited_cols[best] = True
            if row4col[best] == -1:
                sink = best
            else:
                i = row4col[best]

        u[cur_row] += min_val
        for r_i in range(n):
            if visited_rows[r_i] and r_i != cur_row:
                u[r_i] += min_val - shortest[col4row[r_i]]
        for c_j in range(n):
            if visited_cols[c_j]:
                v[c_j] -= min_val - shortest[c_j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            nxt = col4row[i]
            col4row[i] = j
            j = nxt
            if i == cur_row:
                break
    return col4row, True


def _as_cost(cost) -> CostMatrix:
    return cost if isinstance(cost, CostMatrix) else CostMatrix(np.asarray(cost, dtype=np.float64))


def cost_of_permutation(cost, p: Permutation | np.ndarray) -> float:
    """Total ``sum_i C[i, map[i]]``, summed in index order."""
    c = _as_cost(cost)
    m = p.map if isinstance(p, Permutation) else Permutation(p).map
    if m.size != c.size:
        raise DimensionError(f"permutation length {m.size} != cost size {c.size}")
    total = 0.0
    for v in c.data[np.arange(m.size), m].astype(np.float64):
        total += float(v)
    return total


def solve_lap(cost) -> tuple[Permutation, float]:
    """Exact minimum-cost assignment in O(F^3) worst case."""
    c = _as_cost(cost)
    data = np.ascontiguousarray(c.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DomainError("cost matrix contains non-finite entries")
    col4row, ok = _sap_solve(data)
    if not ok:  # pragma: no cover - finite costs are always feasible
        raise DomainError("assignment problem is infeasible")
    p = Permutation(col4row, c.source_layer, c.target_layer, "exact")
    return p, cost_of_permutation(c, p)


def solve_lap_exact(cost) -> tuple[Permutation, float]:
    """Brute-force minimizer over all F! permutations (F <= 10).

    Candidates are visited in lexicographic order; the first strict minimum wins.
    """
    c = _as_cost(cost)
    n = c.size
    if n > MAX_EXACT_SIZE:
        raise SizeError(f"exhaustive search limited to F <= {MAX_EXACT_SIZE}, got {n}")
    data = c.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise DomainError("cost matrix contains non-finite entries")
    best_total = math.inf
    best = None
    rows = np.arange(n)
    perms_iter = itertools.permutations(range(n))
    chunk = 50_000
    while True:
        block = np.array(list(itertools.islice(perms_iter, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        block = block.reshape(-1, n)
        totals = np.zeros(block.shape[0])
        for i in rows:  # same left-to-right order as cost_of_permutation
            totals += data[i, block[:, i]]
        k = int(np.argmin(totals))
        if totals[k] < best_total:
            best_total = float(totals[k])
            best = block[k].copy()
    p = Permutation(best, c.source_layer, c.target_layer, "exact")
    return p, cost_of_permutation(c, p)
