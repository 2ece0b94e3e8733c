"""Matching score, explained variance and cross-entropy delta."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import Permutation
from .errors import (
    BatchKindError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    NoActivationsError,
)
from .sae_model import ActivationBatch


@dataclass(frozen=True)
class MatchingScore:
    score: float
    per_pair: np.ndarray = field(repr=False)  # NaN where the pair was excluded
    n_valid_pairs: int
    n_excluded: int


def matching_score(feat_a: ActivationBatch, feat_b: ActivationBatch, p: Permutation, *,
                   symmetric: bool = False) -> MatchingScore:
    """How often matched features fire together.

    Default: P(target feature active | source feature active), averaged over
    pairs whose source fired at least once. ``symmetric=True`` uses the
    Jaccard ratio |A and B| / |A or B| over pairs where either side fired.
    """
    for batch in (feat_a, feat_b):
        if batch.kind != "feature":
            raise BatchKindError(f"matching_score needs feature batches, got kind={batch.kind!r}")
    if feat_a.n_tokens != feat_b.n_tokens:
        raise DimensionError(f"token counts differ: {feat_a.n_tokens} vs {feat_b.n_tokens}")
    if feat_a.width != len(p) or feat_b.width != len(p):
        raise DimensionError(f"feature widths {feat_a.width}, {feat_b.width} vs permutation {len(p)}")
    act_a = feat_a.data > 0
    act_b = feat_b.data[:, p.map] > 0  # column i is the partner of source feature i
    both = np.count_nonzero(act_a & act_b, axis=0)
    if symmetric:
        denom = np.count_nonzero(act_a | act_b, axis=0)
    else:
        denom = np.count_nonzero(act_a, axis=0)
    valid = denom > 0
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise NoActivationsError("no matched pair has any activation; score undefined")
    per_pair = np.full(len(p), np.nan)
    per_pair[valid] = both[valid] / denom[valid]
    return MatchingScore(float(np.mean(per_pair[valid])), per_pair, n_valid, len(p) - n_valid)


@dataclass(frozen=True)
class ExplainedVariance:
    ev: float
    residual_ratio: float


def explained_variance(x_hat: ActivationBatch, x: ActivationBatch) -> ExplainedVariance:
    """Residual ratio sum_dim Var(x_hat - x) / sum_dim Var(x), and ev = 1 - ratio.

    Variances are population variances over tokens.
    """
    for batch in (x_hat, x):
        if batch.kind != "hidden":
            raise BatchKindError(f"explained_variance needs hidden batches, got kind={batch.kind!r}")
    if x_hat.data.shape != x.data.shape:
        raise DimensionError(f"shapes differ: {x_hat.data.shape} vs {x.data.shape}")
    if x.n_tokens < 2:
        raise DegenerateInputError("need at least two tokens for a variance")
    total = float(np.sum(np.var(x.data, axis=0)))
    if total == 0.0:
        raise DegenerateInputError("reference hidden states have zero variance")
    resid = float(np.sum(np.var(x_hat.data - x.data, axis=0)))
    ratio = resid / total
    return ExplainedVariance(ev=1.0 - ratio, residual_ratio=ratio)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def delta_cross_entropy(logits_mod: ActivationBatch, logits_orig: ActivationBatch, targets) -> float:
    """Mean next-token loss of the modified model minus that of the original, in nats."""
    mod = np.asarray(logits_mod.data if isinstance(logits_mod, ActivationBatch) else logits_mod,
                     dtype=np.float64)
    orig = np.asarray(logits_orig.data if isinstance(logits_orig, ActivationBatch) else logits_orig,
                      dtype=np.float64)
    if mod.ndim != 2 or mod.shape != orig.shape:
        raise DimensionError(f"logit shapes differ or are not 2-D: {mod.shape} vs {orig.shape}")
    if not (np.all(np.isfinite(mod)) and np.all(np.isfinite(orig))):
        raise DomainError("logits contain non-finite values")
    targets = np.asarray(targets)
    n_tokens, vocab = mod.shape
    if targets.shape != (n_tokens,):
        raise DimensionError(f"need {n_tokens} targets, got shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        if not np.all(targets == np.round(targets)):
            raise DomainError("targets must be integers")
        targets = targets.astype(np.int64)
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise DomainError(f"targets must lie in [0, {vocab})")
    rows = np.arange(n_tokens)
    per_token = log_softmax(orig)[rows, targets] - log_softmax(mod)[rows, targets]
    return float(np.mean(per_token))
