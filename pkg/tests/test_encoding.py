"""Oracles for position encodings and the 1D attention forms."""

import math

import numpy as np
import pytest

from haaseg.encoding import (
    EncodingStrategy,
    RelativeBiasParams,
    apply_absolute,
    apply_adpe,
    attend_sequences,
    build_sinusoidal,
    clip_distance,
    combined_ape_rpe_attention_1d,
    new_learnable_table,
    new_relative_bias,
    relative_index_matrix,
    rpe_attention_1d,
)
from haaseg.tensor import ShapeError, Tensor, tsum, mul


def brute_force_plain(q, k, v):
    """Reference 1D attention by explicit enumeration."""
    L = q.shape[0]
    out = np.zeros_like(v)
    for i in range(L):
        logits = np.array([q[i] @ k[j] for j in range(L)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = sum(w[j] * v[j] for j in range(L))
    return out


def brute_force_standalone(q, k, v, pk, pv, k_clip):
    L = q.shape[0]
    out = np.zeros_like(v)
    for i in range(L):
        rel = [clip_distance(j - i, k_clip) + k_clip for j in range(L)]
        logits = np.array([q[i] @ (k[j] + pk[rel[j]]) for j in range(L)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = sum(w[j] * (v[j] + pv[rel[j]]) for j in range(L))
    return out


def brute_force_combined(x, p, wq, wk, wv, rq, rk, rv, k_clip):
    xh = x + p
    q, k, v = xh @ wq.T, xh @ wk.T, xh @ wv.T
    L = x.shape[0]
    out = np.zeros_like(v)
    for i in range(L):
        rel = [clip_distance(j - i, k_clip) + k_clip for j in range(L)]
        logits = np.array(
            [q[i] @ k[j] + q[i] @ rq[rel[j]] + k[j] @ rk[rel[j]] for j in range(L)]
        )
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = sum(w[j] * (v[j] + rv[rel[j]]) for j in range(L))
    return out


class TestStrategy:
    def test_all_seven_values_parse(self):
        names = ["None", "LPE", "APE", "RPE", "APE+RPE", "LPE+RPE", "LPE+APE"]
        assert [EncodingStrategy.from_name(n).value for n in names] == names

    def test_unknown_name_lists_valid(self):
        with pytest.raises(ValueError, match="LPE\\+APE"):
            EncodingStrategy.from_name("ROPE")

    def test_component_flags(self):
        s = EncodingStrategy.LPE_APE
        assert s.uses_learnable and s.uses_sinusoidal and s.relative_mode is None
        assert EncodingStrategy.RPE.relative_mode == "standalone"
        assert EncodingStrategy.APE_RPE.relative_mode == "combined"
        assert EncodingStrategy.NONE.relative_mode is None


class TestSinusoidal:
    def test_row_zero(self):
        t = build_sinusoidal(3, 4).table.data
        np.testing.assert_allclose(t[0], [0.0, 1.0, 0.0, 1.0], atol=1e-15)

    def test_entry_1_0(self):
        for d in (2, 4, 8):
            t = build_sinusoidal(2, d).table.data
            np.testing.assert_allclose(t[1, 0], math.sin(1.0), atol=1e-12)

    def test_pair_norm_invariant(self):
        t = build_sinusoidal(64, 16).table.data
        sq = t[:, 0::2] ** 2 + t[:, 1::2] ** 2
        np.testing.assert_allclose(sq, 1.0, rtol=0, atol=1e-12)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            build_sinusoidal(4, 3)

    def test_frequency_layout(self):
        d = 6
        t = build_sinusoidal(5, d).table.data
        for i in range(5):
            for tt in range(d // 2):
                ang = i / 10000 ** (2 * tt / d)
                assert abs(t[i, 2 * tt] - math.sin(ang)) < 1e-12
                assert abs(t[i, 2 * tt + 1] - math.cos(ang)) < 1e-12


class TestClip:
    @pytest.mark.parametrize("x,k,want", [(5, 2, 2), (-7, 3, -3), (1, 4, 1)])
    def test_values(self, x, k, want):
        assert clip_distance(x, k) == want

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = int(rng.integers(-50, 50))
            k = int(rng.integers(0, 12))
            once = clip_distance(x, k)
            assert clip_distance(once, k) == once
            assert -k <= once <= k

    def test_index_matrix_in_range(self):
        for L, kc in [(1, 0), (5, 2), (9, 8)]:
            idx = relative_index_matrix(L, kc)
            assert idx.min() >= 0 and idx.max() <= 2 * kc


class TestApplyAbsolute:
    def test_zero_input_returns_table(self):
        t = Tensor(np.arange(6.0).reshape(3, 2))
        out = apply_absolute(Tensor(np.zeros((3, 2))), t)
        np.testing.assert_array_equal(out.data, t.data)

    def test_zero_table_identity(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
        out = apply_absolute(x, Tensor(np.zeros((4, 3))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_elementwise_sum(self):
        out = apply_absolute(Tensor([[1.0, 1.0]]), Tensor([[0.5, -0.5]]))
        np.testing.assert_array_equal(out.data, [[1.5, 0.5]])

    def test_length_mismatch_names_lengths(self):
        with pytest.raises(ShapeError, match="4.*3|3.*4"):
            apply_absolute(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 2))))


class TestAdpe:
    def test_zero_learnable_zero_input_gives_sinusoidal(self):
        ps = build_sinusoidal(4, 6)
        pl = new_learnable_table(4, 6, np.random.default_rng(2))
        pl.table.data[:] = 0.0
        out = apply_adpe(Tensor(np.zeros((4, 6))), pl, ps)
        np.testing.assert_array_equal(out.data, ps.table.data)

    def test_cancellation(self):
        ps = build_sinusoidal(4, 6)
        pl = new_learnable_table(4, 6, np.random.default_rng(3))
        pl.table.data[:] = -ps.table.data
        f = Tensor(np.random.default_rng(4).normal(size=(4, 6)))
        out = apply_adpe(f, pl, ps)
        np.testing.assert_allclose(out.data, f.data, atol=1e-15)

    def test_sum(self):
        ps = build_sinusoidal(2, 2)
        ps.table.data[:] = 3.0
        pl = new_learnable_table(2, 2, np.random.default_rng(5))
        pl.table.data[:] = 2.0
        out = apply_adpe(Tensor(np.ones((2, 2))), pl, ps)
        np.testing.assert_array_equal(out.data, np.full((2, 2), 6.0))


class TestRpeAttention:
    def test_zero_bias_reduces_to_plain(self):
        rng = np.random.default_rng(6)
        L, d = 5, 3
        q, k, v = (rng.normal(size=(L, d)) for _ in range(3))
        params = RelativeBiasParams(
            k_clip=2, key_bias=Tensor(np.zeros((5, d))), value_bias=Tensor(np.zeros((5, d)))
        )
        out = rpe_attention_1d(Tensor(q), Tensor(k), Tensor(v), params)
        np.testing.assert_allclose(out.data, brute_force_plain(q, k, v), atol=1e-12)

    def test_length_one(self):
        d = 4
        rng = np.random.default_rng(7)
        params = new_relative_bias(EncodingStrategy.RPE, 3, d, rng)
        v = rng.normal(size=(1, d))
        out = rpe_attention_1d(
            Tensor(rng.normal(size=(1, d))), Tensor(rng.normal(size=(1, d))), Tensor(v), params
        )
        want = v[0] + params.value_bias.data[3]  # relative index 0 maps to row k_clip
        np.testing.assert_allclose(out.data[0], want, atol=1e-14)

    def test_hand_case_matches_brute_force(self):
        rng = np.random.default_rng(8)
        L, d, kc = 2, 3, 1
        q, k, v = (rng.normal(size=(L, d)) for _ in range(3))
        pk, pv = rng.normal(size=(3, d)), rng.normal(size=(3, d))
        params = RelativeBiasParams(k_clip=kc, key_bias=Tensor(pk), value_bias=Tensor(pv))
        out = rpe_attention_1d(Tensor(q), Tensor(k), Tensor(v), params)
        np.testing.assert_allclose(out.data, brute_force_standalone(q, k, v, pk, pv, kc), atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_matches_brute_force(self, seed):
        rng = np.random.default_rng(100 + seed)
        L, d, kc = 7, 4, 2
        q, k, v = (rng.normal(size=(L, d)) for _ in range(3))
        pk, pv = rng.normal(size=(2 * kc + 1, d)), rng.normal(size=(2 * kc + 1, d))
        params = RelativeBiasParams(k_clip=kc, key_bias=Tensor(pk), value_bias=Tensor(pv))
        out = rpe_attention_1d(Tensor(q), Tensor(k), Tensor(v), params)
        np.testing.assert_allclose(out.data, brute_force_standalone(q, k, v, pk, pv, kc), atol=1e-11)


class TestCombinedAttention:
    def test_all_zero_extensions_reduce_to_plain(self):
        rng = np.random.default_rng(9)
        L, d = 4, 3
        x = rng.normal(size=(L, d))
        wq, wk, wv = (rng.normal(size=(d, d)) for _ in range(3))
        z = lambda: Tensor(np.zeros((5, d)))
        params = RelativeBiasParams(k_clip=2, q_bias=z(), k_bias=z(), v_bias=z())
        out = combined_ape_rpe_attention_1d(
            Tensor(x), Tensor(np.zeros((L, d))), params, Tensor(wq), Tensor(wk), Tensor(wv)
        )
        np.testing.assert_allclose(
            out.data, brute_force_plain(x @ wq.T, x @ wk.T, x @ wv.T), atol=1e-12
        )

    def test_length_one(self):
        rng = np.random.default_rng(10)
        d = 3
        x, p = rng.normal(size=(1, d)), rng.normal(size=(1, d))
        wq, wk, wv = (rng.normal(size=(d, d)) for _ in range(3))
        params = new_relative_bias(EncodingStrategy.APE_RPE, 2, d, rng)
        out = combined_ape_rpe_attention_1d(
            Tensor(x), Tensor(p), params, Tensor(wq), Tensor(wk), Tensor(wv)
        )
        want = (x + p)[0] @ wv.T + params.v_bias.data[2]
        np.testing.assert_allclose(out.data[0], want, atol=1e-13)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(200 + seed)
        L, d, kc = 2 if seed == 0 else 6, 3, 2
        x, p = rng.normal(size=(L, d)), rng.normal(size=(L, d))
        wq, wk, wv = (rng.normal(size=(d, d)) for _ in range(3))
        rq, rk, rv = (rng.normal(size=(2 * kc + 1, d)) for _ in range(3))
        params = RelativeBiasParams(k_clip=kc, q_bias=Tensor(rq), k_bias=Tensor(rk), v_bias=Tensor(rv))
        out = combined_ape_rpe_attention_1d(
            Tensor(x), Tensor(p), params, Tensor(wq), Tensor(wk), Tensor(wv)
        )
        want = brute_force_combined(x, p, wq, wk, wv, rq, rk, rv, kc)
        np.testing.assert_allclose(out.data, want, atol=1e-11)


class TestPermutationSensitivity:
    def _plain_attend(self, x, w):
        q = Tensor(x @ w[0].T)
        k = Tensor(x @ w[1].T)
        v = Tensor(x @ w[2].T)
        b = lambda t: t.reshape(1, *t.shape)
        return attend_sequences(b(q), b(k), b(v)).data[0]

    def test_equivariant_without_encoding(self):
        rng = np.random.default_rng(11)
        L, d = 6, 4
        x = rng.normal(size=(L, d))
        w = rng.normal(size=(3, d, d))
        perm = rng.permutation(L)
        base = self._plain_attend(x, w)
        permuted = self._plain_attend(x[perm], w)
        np.testing.assert_allclose(permuted, base[perm], atol=1e-12)

    def test_absolute_encoding_breaks_equivariance(self):
        rng = np.random.default_rng(12)
        L, d = 6, 4
        x = rng.normal(size=(L, d))
        w = rng.normal(size=(3, d, d))
        p = build_sinusoidal(L, d).table.data
        perm = np.roll(np.arange(L), 1)
        base = self._plain_attend(x + p, w)
        permuted = self._plain_attend(x[perm] + p, w)
        assert np.max(np.abs(permuted - base[perm])) > 1e-3


class TestGradientFlow:
    def test_learnable_and_relative_tables_receive_grads(self):
        rng = np.random.default_rng(13)
        L, d, kc = 5, 4, 2
        pl = new_learnable_table(L, d, rng)
        params = new_relative_bias(EncodingStrategy.LPE_RPE, kc, d, rng)
        wq, wk, wv = (Tensor(rng.normal(size=(d, d))) for _ in range(3))
        x = Tensor(rng.normal(size=(L, d)))
        out = combined_ape_rpe_attention_1d(x, pl.table, params, wq, wk, wv)
        tsum(mul(out, out)).backward()
        assert pl.table.grad is not None and np.max(np.abs(pl.table.grad)) > 0
        for name, t in params.tables():
            assert t.grad is not None and np.max(np.abs(t.grad)) > 0, name

    def test_standalone_tables_receive_grads(self):
        rng = np.random.default_rng(14)
        L, d, kc = 4, 3, 1
        params = new_relative_bias(EncodingStrategy.RPE, kc, d, rng)
        q, k, v = (Tensor(rng.normal(size=(L, d))) for _ in range(3))
        out = rpe_attention_1d(q, k, v, params)
        tsum(mul(out, out)).backward()
        for name, t in params.tables():
            assert t.grad is not None and np.max(np.abs(t.grad)) > 0, name
