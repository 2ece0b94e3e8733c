"""Approximate the next layer's hidden state from the current layer's features."""

from __future__ import annotations

import numpy as np

from .assignment import Permutation
from .errors import BatchKindError, DimensionError, LayerMismatchError
from .matching import MatchResult, quantile_split
from .sae_model import ActivationBatch, SaeParams, encode, reconstruct


def _check(sae_t: SaeParams, sae_t1: SaeParams, p: Permutation, x_t: ActivationBatch) -> None:
    if x_t.kind != "hidden":
        raise BatchKindError(f"expected hidden states, got kind={x_t.kind!r}")
    if x_t.width != sae_t.d_model:
        raise DimensionError(f"hidden width {x_t.width} != d={sae_t.d_model}")
    if sae_t.w_enc.shape != sae_t1.w_enc.shape:
        raise DimensionError(f"SAE shapes differ: {sae_t.w_enc.shape} vs {sae_t1.w_enc.shape}")
    if len(p) != sae_t.n_features:
        raise DimensionError(f"permutation length {len(p)} != F={sae_t.n_features}")
    if (p.from_layer, p.to_layer) != (sae_t.layer_id, sae_t1.layer_id):
        raise LayerMismatchError(
            f"permutation {p.from_layer}->{p.to_layer} does not connect "
            f"layers {sae_t.layer_id}->{sae_t1.layer_id}")


def encode_permute_decode(sae_t: SaeParams, sae_t1: SaeParams, p: Permutation,
                          x_t: ActivationBatch) -> ActivationBatch:
    """Encode with layer t's SAE, move features to layer t+1 indexing, decode with layer t+1's SAE."""
    _check(sae_t, sae_t1, p, x_t)
    f_hat = p.apply(encode(sae_t, x_t.data))
    x_hat = f_hat @ sae_t1.w_dec.T + sae_t1.b_dec
    return ActivationBatch(x_hat, "hidden", sae_t1.layer_id)


def quantile_decode(sae_t: SaeParams, sae_t1: SaeParams, result: MatchResult, q: float,
                    x_t: ActivationBatch, *, bias: str = "target") -> ActivationBatch:
    """Hybrid decode: well-matched features go through layer t+1, the rest stay on layer t.

    Features whose matched-pair cost is at or below the q-quantile are permuted
    and decoded with layer t+1's decoder; the others are decoded with layer t's
    own decoder. ``bias`` picks which layer's decoder bias is added
    (``"target"`` = t+1, ``"source"`` = t).
    """
    p = result.permutation
    _check(sae_t, sae_t1, p, x_t)
    if bias not in ("target", "source"):
        raise ValueError(f"bias must be 'target' or 'source', got {bias!r}")
    b_dec = sae_t1.b_dec if bias == "target" else sae_t.b_dec
    low, high = quantile_split(result, q)
    f = encode(sae_t, x_t.data)
    f_low = np.zeros_like(f)
    f_low[:, low] = f[:, low]
    # same expression as encode_permute_decode so q == 1 matches it bit for bit
    x_hat = p.apply(f_low) @ sae_t1.w_dec.T + b_dec
    if high.size:
        x_hat = x_hat + f[:, high] @ sae_t.w_dec[:, high].T
    return ActivationBatch(x_hat, "hidden", sae_t1.layer_id)


def layer_drop(x_t: ActivationBatch, to_layer: int) -> ActivationBatch:
    """Baseline: reuse layer t's hidden state as the estimate for layer t+1."""
    return ActivationBatch(x_t.data, "hidden", to_layer)


def encode_decode_previous(sae_t: SaeParams, x_t: ActivationBatch, to_layer: int) -> ActivationBatch:
    """Baseline: layer t's own SAE reconstruction as the estimate for layer t+1."""
    if x_t.kind != "hidden":
        raise BatchKindError(f"expected hidden states, got kind={x_t.kind!r}")
    return ActivationBatch(reconstruct(sae_t, x_t.data), "hidden", to_layer)
