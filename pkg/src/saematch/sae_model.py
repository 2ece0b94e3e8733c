"""JumpReLU SAE forward pass and threshold folding.

Shapes follow the column-vector convention: ``w_enc`` is (F, d), ``w_dec`` is
(d, F). Batched inputs are (T, d) and batched features (T, F).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BatchKindError,
    DimensionError,
    DomainError,
    FoldStateError,
    InvalidThresholdError,
)

ACTIVATION_KINDS = ("hidden", "feature", "logits")


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)  # always a private copy
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SaeParams:
    """Weights of one layer's JumpReLU SAE.

    Arrays are widened to float64 and made read-only on construction.
    """

    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray
    theta: np.ndarray
    layer_id: int = 0
    folded: bool = False

    def __post_init__(self):
        w_enc = _frozen(self.w_enc, 2, "w_enc")
        b_enc = _frozen(self.b_enc, 1, "b_enc")
        w_dec = _frozen(self.w_dec, 2, "w_dec")
        b_dec = _frozen(self.b_dec, 1, "b_dec")
        theta = _frozen(self.theta, 1, "theta")
        n_feat, d = w_enc.shape
        if n_feat < 1 or d < 1:
            raise DimensionError(f"need F >= 1 and d >= 1, got w_enc shape {w_enc.shape}")
        if w_dec.shape != (d, n_feat):
            raise DimensionError(f"w_dec shape {w_dec.shape} != ({d}, {n_feat})")
        if b_enc.shape != (n_feat,):
            raise DimensionError(f"b_enc length {b_enc.shape[0]} != F={n_feat}")
        if b_dec.shape != (d,):
            raise DimensionError(f"b_dec length {b_dec.shape[0]} != d={d}")
        if theta.shape != (n_feat,):
            raise DimensionError(f"theta length {theta.shape[0]} != F={n_feat}")
        for name, arr in (("w_enc", w_enc), ("b_enc", b_enc), ("w_dec", w_dec),
                          ("b_dec", b_dec), ("theta", theta)):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} contains non-finite values")
        if self.folded:
            if not np.all(theta == 1.0):
                raise InvalidThresholdError("folded SAE must have theta == 1 everywhere")
        elif not np.all(theta > 0):
            bad = int(np.argmin(theta))
            raise InvalidThresholdError(
                f"unfolded SAE needs theta > 0; theta[{bad}] = {theta[bad]!r}")
        layer_id = int(self.layer_id)
        if layer_id < 0:
            raise DomainError(f"layer_id must be >= 0, got {layer_id}")
        for name, arr in (("w_enc", w_enc), ("b_enc", b_enc), ("w_dec", w_dec),
                          ("b_dec", b_dec), ("theta", theta)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "layer_id", layer_id)
        object.__setattr__(self, "folded", bool(self.folded))

    @property
    def n_features(self) -> int:
        return self.w_enc.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_enc.shape[1]

    def with_layer(self, layer_id: int) -> "SaeParams":
        return replace(self, layer_id=layer_id)


@dataclass(frozen=True, eq=False)
class ActivationBatch:
    """A (T, n) block of hidden states, feature activations or logits."""

    data: np.ndarray
    kind: str = "hidden"
    layer_id: int = 0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise BatchKindError(f"kind must be one of {ACTIVATION_KINDS}, got {self.kind!r}")
        data = _frozen(self.data, 2, "data")
        if data.shape[0] < 1:
            raise DimensionError("activation batch needs at least one token")
        if not np.all(np.isfinite(data)):
            raise DomainError("activation batch contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layer_id", int(self.layer_id))

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def drop_first_token(self) -> "ActivationBatch":
        """Return the batch without token 0 (the BOS position)."""
        return ActivationBatch(self.data[1:], self.kind, self.layer_id)


def jump_relu(z, theta) -> np.ndarray:
    """``z`` where ``z > theta`` (strictly), else 0. Broadcasts over leading axes."""
    z = np.asarray(z, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if z.shape[-1:] != theta.shape:
        raise DimensionError(f"z has {z.shape[-1:]} trailing dims, theta has {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise DomainError("theta must be finite")
    return np.where(z > theta, z, 0.0)


def _check_input(x, width: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != width:
        raise DimensionError(f"{name} must have trailing dimension {width}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} contains non-finite values")
    return x


def pre_activations(sae: SaeParams, x) -> np.ndarray:
    x = _check_input(x, sae.d_model, "x")
    return x @ sae.w_enc.T + sae.b_enc


def encode(sae: SaeParams, x) -> np.ndarray:
    """Feature activations for a vector (d,) or batch (T, d)."""
    return jump_relu(pre_activations(sae, x), sae.theta)


def decode(sae: SaeParams, f) -> np.ndarray:
    """Hidden-state estimate ``w_dec @ f + b_dec`` for a vector or batch of features."""
    f = _check_input(f, sae.n_features, "f")
    return f @ sae.w_dec.T + sae.b_dec


def reconstruct(sae: SaeParams, x) -> np.ndarray:
    return decode(sae, encode(sae, x))


def fold_params(sae: SaeParams) -> SaeParams:
    """Move the JumpReLU thresholds into the weights.

    Encoder row i and encoder bias i are divided by ``theta[i]``, decoder
    column i is multiplied by it, and the thresholds become 1. The SAE's
    output is unchanged because ``z / theta > 1`` iff ``z > theta``.
    """
    if sae.folded:
        raise FoldStateError(f"SAE for layer {sae.layer_id} is already folded")
    theta = sae.theta
    if not np.all(theta > 0):
        raise InvalidThresholdError("cannot fold: theta must be strictly positive")
    inv = 1.0 / theta
    return SaeParams(
        w_enc=sae.w_enc * inv[:, None],
        b_enc=sae.b_enc * inv,
        w_dec=sae.w_dec * theta[None, :],
        b_dec=sae.b_dec,
        theta=np.ones_like(theta),
        layer_id=sae.layer_id,
        folded=True,
    )


def ensure_folded(sae: SaeParams) -> SaeParams:
    return sae if sae.folded else fold_params(sae)


def unfold_params(sae: SaeParams, theta) -> SaeParams:
    """Inverse of :func:`fold_params` for a chosen positive threshold vector."""
    if not sae.folded:
        raise FoldStateError(f"SAE for layer {sae.layer_id} is not folded")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (sae.n_features,):
        raise DimensionError(f"theta length {theta.shape} != F={sae.n_features}")
    if not np.all(theta > 0) or not np.all(np.isfinite(theta)):
        raise InvalidThresholdError("unfold thresholds must be finite and > 0")
    return SaeParams(
        w_enc=sae.w_enc * theta[:, None],
        b_enc=sae.b_enc * theta,
        w_dec=sae.w_dec / theta[None, :],
        b_dec=sae.b_dec,
        theta=theta,
        layer_id=sae.layer_id,
        folded=False,
    )


def permute_features(sae: SaeParams, mapping) -> SaeParams:
    """Relabel features so that old feature i becomes new feature ``mapping[i]``."""
    mapping = np.asarray(mapping)
    n = sae.n_features
    if mapping.shape != (n,):
        raise DimensionError(f"mapping length {mapping.shape} != F={n}")
    inv = np.empty(n, dtype=np.int64)
    inv[mapping] = np.arange(n)
    return SaeParams(
        w_enc=sae.w_enc[inv],
        b_enc=sae.b_enc[inv],
        w_dec=sae.w_dec[:, inv],
        b_dec=sae.b_dec,
        theta=sae.theta[inv],
        layer_id=sae.layer_id,
        folded=sae.folded,
    )


@dataclass(frozen=True)
class L0Stats:
    mean_l0: float
    per_token_l0: np.ndarray = field(repr=False)


def l0_stats(features: ActivationBatch) -> L0Stats:
    """Number of strictly positive features per token and its mean."""
    if features.kind != "feature":
        raise BatchKindError(f"l0_stats needs a feature batch, got kind={features.kind!r}")
    per_token = np.count_nonzero(features.data > 0, axis=1)
    return L0Stats(mean_l0=float(per_token.mean()), per_token_l0=per_token)
