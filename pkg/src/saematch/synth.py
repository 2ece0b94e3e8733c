"""Synthetic SAEs with planted feature permutations.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=(stream,))``. Stream 0 draws the first SAE,
stream k draws the k-th planted step, and activation sampling uses its own
seed, so outputs depend only on the spec.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .assignment import Permutation
from .errors import DomainError, SynthesisError
from .matching import compose
from .sae_model import (
    ActivationBatch,
    SaeParams,
    decode,
    encode,
    ensure_folded,
    fold_params,
    permute_features,
    unfold_params,
)

PRNG_ALGORITHM = "PCG64"
MAX_REDRAWS = 100


@dataclass(frozen=True)
class SynthSpec:
    d: int
    F: int
    seed: int = 0
    noise_sigma: float = 0.0
    theta_log_range: tuple[float, float] = (0.5, 4.0)
    scale_growth: float = 1.0
    chain_len: int = 2
    family_size: int = 1
    bias_scale: float = 0.1

    def __post_init__(self):
        lo, hi = self.theta_log_range
        if self.d < 1 or self.F < 1:
            raise DomainError(f"need d >= 1 and F >= 1, got d={self.d}, F={self.F}")
        if not 0 < lo <= hi:
            raise DomainError(f"theta range must satisfy 0 < lo <= hi, got {self.theta_log_range}")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if self.scale_growth < 1:
            raise DomainError("scale_growth must be >= 1")
        if self.chain_len < 2:
            raise DomainError("chain_len must be >= 2")
        if self.family_size < 1:
            raise DomainError("family_size must be >= 1")

    def metadata(self) -> dict:
        meta = asdict(self)
        meta["theta_log_range"] = list(self.theta_log_range)
        meta["prng"] = PRNG_ALGORITHM
        return meta


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


def gen_sae(spec: SynthSpec, layer_id: int = 0, stream: int = 0) -> SaeParams:
    """Random unfolded SAE with unit-norm decoder columns.

    With ``family_size > 1`` consecutive features share one encoder row,
    decoder column and encoder bias and differ only in their thresholds, so
    only the thresholds tell them apart.
    """
    rng = make_rng(spec.seed, stream)
    n_fam = -(-spec.F // spec.family_size)
    w_enc = rng.standard_normal((n_fam, spec.d)) / np.sqrt(spec.d)
    w_dec = rng.standard_normal((spec.d, n_fam))
    w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
    lo, hi = spec.theta_log_range
    theta = np.exp(rng.uniform(np.log(lo), np.log(hi), size=spec.F))
    b_enc = spec.bias_scale * rng.standard_normal(n_fam)
    b_dec = spec.bias_scale * rng.standard_normal(spec.d)
    fam = np.arange(spec.F) // spec.family_size
    return SaeParams(w_enc[fam], b_enc[fam], w_dec[:, fam], b_dec, theta, layer_id, False)


def perturb_folded(sae: SaeParams, sigma: float, rng: np.random.Generator) -> SaeParams:
    """Gaussian noise on a folded SAE, scaled per feature by each weight group's norm.

    Entry std is ``sigma * ||decoder column||`` for the decoder,
    ``sigma * ||encoder row||`` for the encoder and ``sigma * |bias|`` for the bias.
    """
    enc_scale = sigma * np.linalg.norm(sae.w_enc, axis=1)
    dec_scale = sigma * np.linalg.norm(sae.w_dec, axis=0)
    w_enc = sae.w_enc + enc_scale[:, None] * rng.standard_normal(sae.w_enc.shape)
    w_dec = sae.w_dec + dec_scale[None, :] * rng.standard_normal(sae.w_dec.shape)
    b_enc = sae.b_enc + sigma * np.abs(sae.b_enc) * rng.standard_normal(sae.n_features)
    return SaeParams(w_enc, b_enc, w_dec, sae.b_dec, sae.theta, sae.layer_id, True)


def _next_layer(a: SaeParams, sigma: float, growth: float, rng: np.random.Generator,
                layer_id: int) -> tuple[SaeParams, Permutation]:
    mapping = rng.permutation(a.n_features)
    truth = Permutation(mapping, a.layer_id, layer_id, "exact")
    moved = permute_features(a, mapping)
    # hidden norms grow by `growth`: thresholds and encoder bias scale with them
    b = SaeParams(moved.w_enc, moved.b_enc * growth, moved.w_dec, moved.b_dec,
                  moved.theta * growth, layer_id, False)
    if sigma == 0:
        return b, truth
    folded = fold_params(b)
    for _ in range(MAX_REDRAWS):
        noisy = perturb_folded(folded, sigma, rng)
        theta = np.linalg.norm(noisy.w_dec, axis=0)
        if np.all(np.isfinite(theta)) and np.all(theta > 0):
            return unfold_params(noisy, theta), truth
    raise SynthesisError(f"could not draw positive thresholds in {MAX_REDRAWS} attempts")


def gen_planted_pair(spec: SynthSpec) -> tuple[SaeParams, SaeParams, Permutation]:
    """Layer 0 SAE, a noisy feature-permuted copy as layer 1, and the planted map."""
    a = gen_sae(spec, layer_id=0, stream=0)
    b, truth = _next_layer(a, spec.noise_sigma, 1.0, make_rng(spec.seed, 1), 1)
    return a, b, truth


def gen_norm_growth_pair(spec: SynthSpec) -> tuple[SaeParams, SaeParams, Permutation]:
    """Like :func:`gen_planted_pair` but layer 1 sees hidden states ``scale_growth`` times larger.

    The growth lands in the thresholds; unfolded decoder columns stay unit-norm
    on both sides, so only folded weights carry the per-feature scale.
    """
    a = gen_sae(spec, layer_id=0, stream=0)
    b, truth = _next_layer(a, spec.noise_sigma, spec.scale_growth, make_rng(spec.seed, 1), 1)
    return a, b, truth


def gen_chain(spec: SynthSpec) -> tuple[list[SaeParams], list[Permutation]]:
    """``chain_len`` SAEs, each a noisy permuted copy of the previous one.

    Returns the SAEs and the cumulative planted maps ``0 -> k`` for k = 1..chain_len-1.
    """
    saes = [gen_sae(spec, layer_id=0, stream=0)]
    truths: list[Permutation] = []
    for k in range(1, spec.chain_len):
        b, step = _next_layer(saes[-1], spec.noise_sigma, spec.scale_growth, make_rng(spec.seed, k), k)
        saes.append(b)
        truths.append(step if not truths else compose(truths[-1], step))
    return saes, truths


def gen_activations(sae: SaeParams, T: int, seed: int, *, active: int = 8,
                    coef_range: tuple[float, float] = (1.0, 3.0),
                    noise: float = 0.0) -> tuple[ActivationBatch, ActivationBatch]:
    """Hidden states built from ``active`` random decoder directions per token.

    Token t is ``sum_k c_k * theta_k * u_k + b_dec + noise`` where ``u_k`` are
    unit decoder directions and ``c_k`` is drawn from ``coef_range``, i.e. the
    folded decoder columns. The feature batch is ``encode(sae, hidden)``.
    """
    if T < 1:
        raise DomainError("T must be >= 1")
    active = min(active, sae.n_features)
    rng = make_rng(seed, 0)
    codes = np.zeros((T, sae.n_features))
    for t in range(T):
        idx = rng.choice(sae.n_features, size=active, replace=False)
        codes[t, idx] = rng.uniform(*coef_range, size=active)
    directions = ensure_folded(sae).w_dec
    hidden = codes @ directions.T + sae.b_dec
    if noise > 0:
        hidden = hidden + noise * rng.standard_normal(hidden.shape)
    h = ActivationBatch(hidden, "hidden", sae.layer_id)
    return h, ActivationBatch(encode(sae, hidden), "feature", sae.layer_id)


def hidden_for_codes(sae: SaeParams, codes) -> np.ndarray:
    """Least-squares hidden states whose encoder pre-activations equal ``codes``.

    Exact whenever F <= d and the encoder has full row rank.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    rhs = (codes - sae.b_enc).T
    x, *_ = np.linalg.lstsq(sae.w_enc, rhs, rcond=None)
    return x.T


def gen_stream(a: SaeParams, b: SaeParams, truth: Permutation, T: int, seed: int, *,
               active: int = 8, noise: float = 0.0) -> tuple[ActivationBatch, ActivationBatch]:
    """Two-layer token stream in which layer t's active features persist into layer t+1.

    The layer t+1 state is the layer t features, carried through the planted
    map and decoded by ``b``, plus optional Gaussian noise.
    """
    x_t, f_t = gen_activations(a, T, seed, active=active)
    x_t1 = decode(b, truth.apply(f_t.data))
    if noise > 0:
        x_t1 = x_t1 + noise * make_rng(seed, 1).standard_normal(x_t1.shape)
    return x_t, ActivationBatch(x_t1, "hidden", b.layer_id)
