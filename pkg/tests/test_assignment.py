import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saematch.assignment import (
    CostMatrix,
    GroupWeights,
    Permutation,
    WeightSet,
    build_cost_matrix,
    cost_of_permutation,
    pairwise_sq_distances,
    solve_lap,
    solve_lap_exact,
)
from saematch.errors import DimensionError, DomainError, FoldStateError, SizeError
from saematch.sae_model import SaeParams, fold_params, permute_features

from conftest import random_sae


def heap_permutations(n):
    """All permutations of range(n) by Heap's algorithm (order differs from lexicographic)."""
    a = list(range(n))
    c = [0] * n
    yield tuple(a)
    i = 0
    while i < n:
        if c[i] < i:
            if i % 2 == 0:
                a[0], a[i] = a[i], a[0]
            else:
                a[c[i]], a[i] = a[i], a[c[i]]
            yield tuple(a)
            c[i] += 1
            i = 0
        else:
            c[i] = 0
            i += 1


def heap_min(cost):
    n = cost.shape[0]
    best = np.inf
    for perm in heap_permutations(n):
        total = 0.0
        for i in range(n):
            total += float(cost[i, perm[i]])
        best = min(best, total)
    return best


def loop_cost(a, b, ws):
    n = a.n_features
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            if ws in ("decoder_only", "encoder_decoder_bias"):
                s += sum((a.w_dec[k, i] - b.w_dec[k, j]) ** 2 for k in range(a.d_model))
            if ws in ("encoder_only", "encoder_decoder_bias"):
                s += sum((a.w_enc[i, k] - b.w_enc[j, k]) ** 2 for k in range(a.d_model))
            if ws == "encoder_decoder_bias":
                s += (a.b_enc[i] - b.b_enc[j]) ** 2
            out[i, j] = s
    return out


class TestPermutation:
    def test_bijection_enforced(self):
        with pytest.raises(DomainError):
            Permutation([0, 0, 1])
        with pytest.raises(DomainError):
            Permutation([0, 3])

    def test_inverse_and_apply(self):
        p = Permutation([2, 0, 1], 3, 5)
        inv = p.inverse()
        assert inv.map.tolist() == [1, 2, 0]
        assert (inv.from_layer, inv.to_layer) == (5, 3)
        f = np.array([10.0, 20.0, 30.0])
        assert p.apply(f).tolist() == [20.0, 30.0, 10.0]
        assert np.array_equal(inv.apply(p.apply(f)), f)

    def test_weight_set_aliases(self):
        assert WeightSet.parse("dec") is WeightSet.DECODER_ONLY
        assert WeightSet.parse("enc") is WeightSet.ENCODER_ONLY
        assert WeightSet.parse("enc-dec-bias") is WeightSet.ENCODER_DECODER_BIAS
        assert WeightSet.parse("encoder_only") is WeightSet.ENCODER_ONLY


class TestCostMatrix:
    def test_self_distance_zero(self, rng):
        a = fold_params(random_sae(rng, 16, 5))
        for ws in WeightSet:
            c = build_cost_matrix(a, a, ws)
            assert not np.diag(c.data).any()
            assert np.all(c.data >= 0)

    def test_permuted_copy_zero_on_planted_pairs(self, rng):
        a = fold_params(random_sae(rng, 16, 5))
        pi = rng.permutation(16)
        b = permute_features(a, pi)
        c = build_cost_matrix(a, b)
        assert not c.data[np.arange(16), pi].any()

    def test_hand_case(self):
        def one(w_dec):
            return SaeParams([[1.0], [1.0]], [0.0, 0.0], w_dec, [0.0], [1.0, 1.0], folded=True)

        a, b = one([[1.0, 0.0]]), one([[0.0, 1.0]])
        c = build_cost_matrix(a, b, "decoder_only")
        assert c.data.tolist() == [[1.0, 0.0], [0.0, 1.0]]
        np.testing.assert_array_equal(c.data, loop_cost(a, b, "decoder_only"))

    @pytest.mark.parametrize("ws", [w.value for w in WeightSet])
    def test_against_loop(self, rng, ws):
        a = fold_params(random_sae(rng, 7, 4))
        b = fold_params(random_sae(rng, 7, 4, layer_id=1))
        c = build_cost_matrix(a, b, ws)
        np.testing.assert_allclose(c.data, loop_cost(a, b, ws), rtol=1e-13, atol=1e-15)
        assert (c.source_layer, c.target_layer) == (0, 1)

    def test_group_weights(self, rng):
        a = fold_params(random_sae(rng, 6, 3))
        b = fold_params(random_sae(rng, 6, 3))
        dec = build_cost_matrix(a, b, "decoder_only").data
        enc = build_cost_matrix(a, b, "encoder_only").data
        bias = (a.b_enc[:, None] - b.b_enc[None, :]) ** 2
        c = build_cost_matrix(a, b, weights=GroupWeights(2.0, 0.5, 3.0)).data
        np.testing.assert_allclose(c, 2 * dec + 0.5 * enc + 3 * bias, rtol=1e-12)

    def test_requires_folded(self, rng):
        a = random_sae(rng, 4, 3)
        with pytest.raises(FoldStateError):
            build_cost_matrix(a, a)
        assert build_cost_matrix(a, a, allow_unfolded=True).size == 4

    def test_shape_mismatch(self, rng):
        a = fold_params(random_sae(rng, 4, 3))
        b = fold_params(random_sae(rng, 5, 3))
        with pytest.raises(DimensionError):
            build_cost_matrix(a, b)

    def test_thread_count_independent(self, rng):
        a = rng.standard_normal((70, 9))
        b = rng.standard_normal((70, 9))
        ref = pairwise_sq_distances(a, b, threads=1)
        for t in (2, 3, 8):
            assert pairwise_sq_distances(a, b, threads=t).tobytes() == ref.tobytes()

    def test_float32_storage(self, rng):
        a = rng.standard_normal((10, 4))
        out = pairwise_sq_distances(a, a, dtype=np.float32)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out, pairwise_sq_distances(a, a), rtol=1e-6)

    def test_non_square_rejected(self):
        with pytest.raises(DimensionError):
            CostMatrix(np.zeros((2, 3)))


class TestSolvers:
    def test_exact_examples(self):
        p, c = solve_lap_exact([[0.0, 1.0], [1.0, 0.0]])
        assert p.map.tolist() == [0, 1] and c == 0
        p, c = solve_lap_exact([[1.0, 0.0], [0.0, 1.0]])
        assert p.map.tolist() == [1, 0] and c == 0

    def test_lap_examples(self):
        p, c = solve_lap([[0.0, 1.0], [1.0, 0.0]])
        assert p.map.tolist() == [0, 1] and c == 0
        p, c = solve_lap(np.full((5, 5), 0.75))
        assert c == 5 * 0.75
        assert p.map.tolist() == [0, 1, 2, 3, 4]

    def test_exact_random_6x6_two_orders(self):
        cost = np.random.default_rng(6).random((6, 6))
        _, c = solve_lap_exact(cost)
        assert c == heap_min(cost)
        assert sum(1 for _ in heap_permutations(6)) == 720

    def test_exact_size_limit(self):
        with pytest.raises(SizeError):
            solve_lap_exact(np.zeros((11, 11)))

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            solve_lap([[0.0, np.inf], [1.0, 0.0]])
        with pytest.raises(DomainError):
            solve_lap([[0.0, np.nan], [1.0, 0.0]])

    def test_single_feature(self):
        p, c = solve_lap([[2.5]])
        assert p.map.tolist() == [0] and c == 2.5

    def test_cost_of_permutation(self, rng):
        assert cost_of_permutation(np.zeros((4, 4)), Permutation([3, 1, 0, 2])) == 0
        diag0 = rng.random((4, 4))
        np.fill_diagonal(diag0, 0)
        assert cost_of_permutation(diag0, Permutation.identity(4)) == 0
        cost = rng.random((9, 9))
        p = Permutation(rng.permutation(9))
        expected = 0.0
        for i in range(9):
            expected += cost[i, p.map[i]]
        assert cost_of_permutation(cost, p) == expected
        with pytest.raises(DimensionError):
            cost_of_permutation(cost, Permutation.identity(3))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.booleans())
    def test_matches_brute_force(self, n, seed, integer):
        r = np.random.default_rng(seed)
        cost = r.integers(0, 4, (n, n)).astype(float) if integer else r.random((n, n))
        _, c = solve_lap(cost)
        _, c_exact = solve_lap_exact(cost)
        assert c == c_exact

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 2**32 - 1))
    def test_lower_bound(self, n, seed):
        r = np.random.default_rng(seed)
        cost = r.random((n, n))
        _, c = solve_lap(cost)
        for _ in range(20):
            assert c <= cost_of_permutation(cost, Permutation(r.permutation(n))) + 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 2**32 - 1))
    def test_transpose_gives_inverse(self, n, seed):
        cost = np.random.default_rng(seed).random((n, n))  # continuous draws: unique optimum a.s.
        p, _ = solve_lap(cost)
        q, _ = solve_lap(cost.T)
        assert q.same_map(p.inverse())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_frobenius_equivalence(self, n, d, seed):
        # unit-norm columns: min sum ||a_i - b_pi(i)||^2 <=> max sum <a_i, b_pi(i)>
        r = np.random.default_rng(seed)
        a = r.standard_normal((n, d))
        b = r.standard_normal((n, d))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        p_dist, c_dist = solve_lap(pairwise_sq_distances(a, b))
        p_dot, _ = solve_lap(-(a @ b.T))
        inner = (a @ b.T)[np.arange(n), p_dot.map].sum()
        assert c_dist == pytest.approx(2 * n - 2 * inner, abs=1e-9)
        assert cost_of_permutation(pairwise_sq_distances(a, b), p_dot) == pytest.approx(c_dist, abs=1e-9)

    def test_large_against_cost_oracle(self):
        cost = np.random.default_rng(3).random((200, 200))
        p, c = solve_lap(cost)
        assert c == cost_of_permutation(cost, p)
        # a greedy assignment is never better
        taken, greedy = set(), 0.0
        for i in range(200):
            j = min((j for j in range(200) if j not in taken), key=lambda j: cost[i, j])
            taken.add(j)
            greedy += cost[i, j]
        assert c <= greedy
