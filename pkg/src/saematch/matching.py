"""Layer-pair matching, permutation composition and MSE quantile splits."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assignment import (
    CostMatrix,
    GroupWeights,
    Permutation,
    WeightSet,
    build_cost_matrix,
    cost_of_permutation,
    solve_lap,
)
from .errors import DimensionError, DomainError, LayerMismatchError
from .sae_model import SaeParams, ensure_folded

SOLVER_ID = "sap-dense-v1"


@dataclass(frozen=True)
class MatchOptions:
    folded: bool = True
    weight_set: WeightSet = WeightSet.ENCODER_DECODER_BIAS
    weights: GroupWeights = GroupWeights()
    threads: int | None = None

    def fingerprint(self) -> str:
        payload = {
            "folded": self.folded,
            "weight_set": WeightSet.parse(self.weight_set).value,
            "weights": [self.weights.decoder, self.weights.encoder, self.weights.bias],
            "solver": SOLVER_ID,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class MatchResult:
    permutation: Permutation
    total_cost: float
    per_pair_mse: np.ndarray = field(repr=False)
    weight_set: WeightSet = WeightSet.ENCODER_DECODER_BIAS
    folded: bool = True
    config_fingerprint: str = ""

    @property
    def from_layer(self) -> int:
        return self.permutation.from_layer

    @property
    def to_layer(self) -> int:
        return self.permutation.to_layer


def _cost_matrix(a: SaeParams, b: SaeParams, opts: MatchOptions) -> CostMatrix:
    if opts.folded:
        a, b = ensure_folded(a), ensure_folded(b)
    return build_cost_matrix(a, b, opts.weight_set, weights=opts.weights,
                             allow_unfolded=not opts.folded, threads=opts.threads)


def _result_from_cost(cost: CostMatrix, opts: MatchOptions) -> MatchResult:
    p, total = solve_lap(cost)
    per_pair = cost.data[np.arange(p.map.size), p.map].astype(np.float64)
    per_pair.setflags(write=False)
    return MatchResult(p, total, per_pair, WeightSet.parse(opts.weight_set),
                       opts.folded, opts.fingerprint())


def match_layers(a: SaeParams, b: SaeParams, opts: MatchOptions = MatchOptions()) -> MatchResult:
    """Find the feature permutation from ``a`` to ``b`` minimizing total squared distance."""
    return _result_from_cost(_cost_matrix(a, b, opts), opts)


def compose(p_ab: Permutation, p_bc: Permutation) -> Permutation:
    """A->C map obtained by following A->B then B->C."""
    if len(p_ab) != len(p_bc):
        raise DimensionError(f"permutation lengths differ: {len(p_ab)} vs {len(p_bc)}")
    if p_ab.to_layer != p_bc.from_layer:
        raise LayerMismatchError(
            f"cannot compose {p_ab.from_layer}->{p_ab.to_layer} with {p_bc.from_layer}->{p_bc.to_layer}")
    return Permutation(p_bc.map[p_ab.map], p_ab.from_layer, p_bc.to_layer, "composed")


def compose_all(perms) -> Permutation:
    perms = list(perms)
    if not perms:
        raise DomainError("nothing to compose")
    out = perms[0]
    for p in perms[1:]:
        out = compose(out, p)
    return out


def agreement(p: Permutation, q: Permutation) -> float:
    """Fraction of source indices that both permutations send to the same target."""
    if len(p) != len(q):
        raise DimensionError(f"permutation lengths differ: {len(p)} vs {len(q)}")
    return float(np.count_nonzero(p.map == q.map)) / len(p)


@dataclass(frozen=True)
class PermutationChain:
    """Consecutive-pair matches; longer spans are composed on demand."""

    results: tuple

    def __post_init__(self):
        results = tuple(self.results)
        for left, right in zip(results, results[1:]):
            if left.to_layer != right.from_layer:
                raise LayerMismatchError(
                    f"chain breaks between {left.from_layer}->{left.to_layer} "
                    f"and {right.from_layer}->{right.to_layer}")
        object.__setattr__(self, "results", results)

    def __len__(self) -> int:
        return len(self.results)

    @property
    def layers(self) -> list[int]:
        return [self.results[0].from_layer] + [r.to_layer for r in self.results]

    def span(self, i: int, j: int) -> Permutation:
        """Composed permutation between chain positions ``i < j``."""
        if not 0 <= i < j <= len(self.results):
            raise DomainError(f"need 0 <= i < j <= {len(self.results)}, got ({i}, {j})")
        return compose_all(r.permutation for r in self.results[i:j])


def _check_chain(saes) -> None:
    if len(saes) < 2:
        raise DomainError("a chain needs at least two SAEs")
    shape = saes[0].w_enc.shape
    for s in saes[1:]:
        if s.w_enc.shape != shape:
            raise DimensionError(f"layer {s.layer_id} has shape {s.w_enc.shape}, expected {shape}")
    ids = [s.layer_id for s in saes]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise LayerMismatchError(f"layer ids must be strictly increasing, got {ids}")


def match_chain(saes, opts: MatchOptions = MatchOptions(), workers: int | None = None) -> PermutationChain:
    """Match every consecutive pair of a stack of SAEs.

    Cost matrices are built one at a time (each build is itself parallel);
    the assignment solves release the GIL and run concurrently.
    """
    saes = list(saes)
    _check_chain(saes)
    folded = [ensure_folded(s) for s in saes] if opts.folded else saes
    costs = [_cost_matrix(a, b, opts) for a, b in zip(folded, folded[1:])]
    n_workers = workers or min(len(costs), opts.threads or 1)
    if n_workers <= 1:
        results = [_result_from_cost(c, opts) for c in costs]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda c: _result_from_cost(c, opts), costs))
    return PermutationChain(tuple(results))


def exact_span(saes, i: int, j: int, opts: MatchOptions = MatchOptions()) -> Permutation:
    """Direct match between chain positions ``i`` and ``j`` (no composition)."""
    return match_layers(saes[i], saes[j], opts).permutation


def quantile_threshold(values, q: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"quantile must lie in [0, 1], got {q}")
    return float(np.quantile(values, q, method="linear"))


def quantile_split(result: MatchResult | np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Split source features into low-MSE and high-MSE index sets.

    A feature is low when its matched-pair cost is <= the linearly interpolated
    q-quantile of all pair costs. ``q == 0`` puts every feature in the high set.
    """
    mse = result.per_pair_mse if isinstance(result, MatchResult) else np.asarray(result, dtype=np.float64)
    threshold = quantile_threshold(mse, q)
    if q == 0.0:
        low_mask = np.zeros(mse.size, dtype=bool)
    else:
        low_mask = mse <= threshold
    idx = np.arange(mse.size)
    return idx[low_mask], idx[~low_mask]


GROUPS = ("decoder", "encoder", "encoder_bias")


def group_mse(a: SaeParams, b: SaeParams, p: Permutation | None = None) -> dict[str, float]:
    """Mean squared error per weight group after permuting ``b`` onto ``a``.

    Both SAEs are folded first, so the numbers are on the scale of actual
    reconstructions whichever way the permutation was found. ``p=None`` means
    no permutation (identity).
    """
    a, b = ensure_folded(a), ensure_folded(b)
    m = np.arange(a.n_features) if p is None else p.map
    return {
        "decoder": float(np.mean((a.w_dec - b.w_dec[:, m]) ** 2)),
        "encoder": float(np.mean((a.w_enc - b.w_enc[m]) ** 2)),
        "encoder_bias": float(np.mean((a.b_enc - b.b_enc[m]) ** 2)),
    }
