import numpy as np
import pytest

from saematch.assignment import WeightSet
from saematch.errors import DomainError
from saematch.matching import MatchOptions, agreement, match_layers
from saematch.sae_model import encode, fold_params, l0_stats
from saematch.synth import (
    PRNG_ALGORITHM,
    SynthSpec,
    gen_activations,
    gen_chain,
    gen_norm_growth_pair,
    gen_planted_pair,
    gen_sae,
    gen_stream,
    hidden_for_codes,
    make_rng,
)

NAMES = ("w_enc", "b_enc", "w_dec", "b_dec", "theta")


def same_sae(a, b):
    return all(getattr(a, n).tobytes() == getattr(b, n).tobytes() for n in NAMES)


class TestGenSae:
    def test_deterministic(self):
        spec = SynthSpec(d=8, F=32, seed=99)
        assert same_sae(gen_sae(spec), gen_sae(spec))
        assert not same_sae(gen_sae(spec), gen_sae(SynthSpec(d=8, F=32, seed=100)))

    def test_construction(self):
        spec = SynthSpec(d=8, F=64, seed=1, theta_log_range=(0.3, 2.0))
        sae = gen_sae(spec)
        np.testing.assert_allclose(np.linalg.norm(sae.w_dec, axis=0), 1.0, atol=1e-9)
        assert np.all((sae.theta >= 0.3) & (sae.theta <= 2.0))
        assert not sae.folded

    def test_families_share_weights(self):
        sae = gen_sae(SynthSpec(d=8, F=12, seed=1, family_size=4))
        for start in (0, 4, 8):
            block = slice(start, start + 4)
            assert np.all(sae.w_enc[block] == sae.w_enc[start])
            assert np.all(sae.w_dec[:, block] == sae.w_dec[:, [start]])
            assert len(set(sae.theta[block].tolist())) == 4

    def test_spec_validation(self):
        with pytest.raises(DomainError):
            SynthSpec(d=4, F=4, theta_log_range=(0.0, 1.0))
        with pytest.raises(DomainError):
            SynthSpec(d=4, F=4, noise_sigma=-1)
        with pytest.raises(DomainError):
            SynthSpec(d=4, F=4, scale_growth=0.5)
        with pytest.raises(DomainError):
            SynthSpec(d=4, F=4, chain_len=1)

    def test_metadata_names_prng(self):
        meta = SynthSpec(d=4, F=4).metadata()
        assert meta["prng"] == PRNG_ALGORITHM == "PCG64"
        assert make_rng(1, 2).random() == make_rng(1, 2).random()
        assert make_rng(1, 2).random() != make_rng(1, 3).random()


class TestPairs:
    @pytest.mark.parametrize("ws", list(WeightSet))
    def test_zero_noise_fixed_point(self, ws):
        a, b, truth = gen_planted_pair(SynthSpec(d=16, F=64, seed=4))
        r = match_layers(a, b, MatchOptions(weight_set=ws))
        assert r.permutation.same_map(truth) and r.total_cost == 0.0

    def test_truth_is_bijection(self):
        _, _, truth = gen_planted_pair(SynthSpec(d=4, F=50, seed=2, noise_sigma=0.1))
        assert sorted(truth.map.tolist()) == list(range(50))
        assert (truth.from_layer, truth.to_layer) == (0, 1)

    def test_noisy_thresholds_positive(self):
        _, b, _ = gen_planted_pair(SynthSpec(d=4, F=50, seed=2, noise_sigma=0.5))
        assert np.all(b.theta > 0)

    def test_noise_scale(self):
        # the folded decoder perturbation is about sigma times each column's norm
        spec = SynthSpec(d=64, F=200, seed=8, noise_sigma=0.05)
        a, b, truth = gen_planted_pair(spec)
        fa, fb = fold_params(a), fold_params(b)
        diff = fb.w_dec[:, truth.map] - fa.w_dec
        rel = np.linalg.norm(diff, axis=0) / np.linalg.norm(fa.w_dec, axis=0)
        assert 0.8 * 0.05 * np.sqrt(64) < np.median(rel) < 1.2 * 0.05 * np.sqrt(64)

    def test_norm_growth_reduces_to_planted(self):
        spec = SynthSpec(d=8, F=32, seed=3)
        p1, p2 = gen_planted_pair(spec), gen_norm_growth_pair(spec)
        assert same_sae(p1[1], p2[1]) and p1[2].same_map(p2[2])

    def test_norm_growth_structure(self):
        spec = SynthSpec(d=8, F=32, seed=3, scale_growth=3.0)
        a, b, truth = gen_norm_growth_pair(spec)
        np.testing.assert_allclose(np.linalg.norm(b.w_dec, axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(b.theta[truth.map], 3.0 * a.theta, rtol=1e-15)

    def test_norm_growth_folded_helps(self):
        folded, unfolded = [], []
        for seed in range(4):
            spec = SynthSpec(d=32, F=256, seed=seed, noise_sigma=0.05, scale_growth=3.0, family_size=4)
            a, b, truth = gen_norm_growth_pair(spec)
            folded.append(agreement(match_layers(a, b).permutation, truth))
            unfolded.append(agreement(match_layers(a, b, MatchOptions(folded=False)).permutation, truth))
        assert np.mean(folded) >= np.mean(unfolded)


class TestChain:
    def test_chain_len_two_is_pair(self):
        spec = SynthSpec(d=8, F=32, seed=6, noise_sigma=0.05)
        saes, truths = gen_chain(spec)
        a, b, truth = gen_planted_pair(spec)
        assert len(saes) == 2 and same_sae(saes[0], a) and same_sae(saes[1], b)
        assert truths[0].same_map(truth)

    def test_cumulative_truths(self):
        saes, truths = gen_chain(SynthSpec(d=8, F=32, seed=6, chain_len=4))
        assert [s.layer_id for s in saes] == [0, 1, 2, 3]
        for k, t in enumerate(truths, start=1):
            assert (t.from_layer, t.to_layer) == (0, k)
            assert match_layers(saes[0], saes[k]).permutation.same_map(t)


class TestActivations:
    def test_kinds_and_determinism(self):
        sae = gen_sae(SynthSpec(d=8, F=32, seed=1))
        h1, f1 = gen_activations(sae, 20, seed=3)
        h2, f2 = gen_activations(sae, 20, seed=3)
        assert (h1.kind, f1.kind) == ("hidden", "feature")
        assert h1.data.tobytes() == h2.data.tobytes()
        assert np.array_equal(f1.data, encode(sae, h1.data))

    def test_controllable_l0(self):
        sae = gen_sae(SynthSpec(d=64, F=256, seed=1))
        _, feats = gen_activations(sae, 200, seed=0, active=4)
        assert 2 <= l0_stats(feats).mean_l0 <= 40

    def test_single_planted_feature(self):
        sae = gen_sae(SynthSpec(d=8, F=4, seed=2))
        codes = np.zeros(4)
        codes[2] = 1.5 * sae.theta[2]
        x = hidden_for_codes(sae, codes)
        f = encode(sae, x[0])
        assert np.count_nonzero(f) == 1 and f[2] == pytest.approx(codes[2], rel=1e-12)

    def test_stream(self):
        a, b, truth = gen_planted_pair(SynthSpec(d=8, F=32, seed=1))
        x_t, x_t1 = gen_stream(a, b, truth, T=10, seed=2)
        assert x_t.layer_id == 0 and x_t1.layer_id == 1
        assert x_t.data.shape == x_t1.data.shape == (10, 8)
