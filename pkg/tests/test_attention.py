import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imlspike import autodiff as ad
from imlspike.attention import (
    AttentionParams,
    attn_logits,
    build_hdm,
    channel_mlp,
    decay_factor,
    hd_repssa_l,
    hd_repssa_s,
    rep_fuse,
    sdsa3,
)
from imlspike.checks import check_logit_fusion
from imlspike.errors import DimensionError, PreconditionError
from imlspike.neuron import NeuronConfig, SpikingNeuron, mls_fire

T = 4


def neuron(channels):
    return SpikingNeuron(channels, NeuronConfig(theta=1.0, T=T), "mls")


def random_params(rng, D, H, scale=1.0):
    return AttentionParams(*(ad.Tensor(scale * rng.normal(size=(D, D))) for _ in range(4)), heads=H)


def random_spikes(rng, N, D):
    return rng.integers(0, T + 1, size=(N, D)).astype(np.float64)


def sn(x):
    return mls_fire(x, 1.0, T).levels.astype(np.float64)


def oracle_softmax_attention(X, p, H_mask):
    """Reference loop over heads with plain numpy."""
    D = X.shape[1]
    dk = D // p.heads
    V = sn(X @ p.W_V.data)
    heads = []
    for h in range(p.heads):
        c = slice(h * dk, (h + 1) * dk)
        A = (X @ p.W_Q.data[:, c]) @ (X @ p.W_K.data[:, c]).T
        if H_mask is not None:
            A = A * H_mask
        A = A / math.sqrt(dk)
        e = np.exp(A - A.max(axis=1, keepdims=True))
        heads.append((e / e.sum(axis=1, keepdims=True)) @ V[:, c])
    return sn(np.concatenate(heads, axis=1)) @ p.W_out.data


class TestDecayMask:
    def test_first_layer_factor(self):
        assert decay_factor(1) == 0.984375

    def test_twelfth_layer_factor(self):
        assert decay_factor(12) == 1 - 2 ** -17

    def test_entry_at_distance_three(self):
        m = build_hdm(4, 1)
        np.testing.assert_allclose(m.values[0, 3], 0.9538536072, atol=1e-10)

    def test_symmetric_toeplitz_unit_diagonal(self):
        v = build_hdm(7, 3).values
        np.testing.assert_array_equal(v, v.T)
        np.testing.assert_array_equal(np.diag(v), 1.0)
        for k in range(1, 7):
            d = np.diag(v, k)
            np.testing.assert_array_equal(d, d[0])
        assert np.all((v > 0) & (v <= 1))

    def test_layer_index_is_one_based(self):
        with pytest.raises(PreconditionError):
            decay_factor(0)


class TestFusion:
    def test_random_sweep(self):
        res = check_logit_fusion(seed=0, trials=100)
        assert res.ok, res.failures[:5]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 8), st.integers(0, 10**6))
    def test_fused_equals_factored(self, H, dk, N, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, H * dk, H)
        X = random_spikes(rng, N, H * dk)
        a = attn_logits(X, p, "factored").data
        b = attn_logits(X, rep_fuse(p), "fused").data
        np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-9 * max(1.0, np.abs(a).max()))

    def test_fused_block_shape(self):
        p = random_params(np.random.default_rng(0), 8, 2)
        assert rep_fuse(p).W_QK.shape == (2, 8, 8)

    def test_head_mismatch(self):
        with pytest.raises(DimensionError):
            random_params(np.random.default_rng(0), 6, 4)


class TestSoftmaxVariant:
    def test_matches_reference_loop(self):
        rng = np.random.default_rng(1)
        X = random_spikes(rng, 6, 8)
        p = random_params(rng, 8, 2, scale=0.3)
        mask = build_hdm(6, 2)
        got = hd_repssa_s(X, p, mask, neuron(8), neuron(8)).data
        np.testing.assert_allclose(got, oracle_softmax_attention(X, p, mask.values), rtol=1e-9)

    def test_single_token_identity_chain(self):
        I = ad.Tensor(np.eye(1))
        p = AttentionParams(I, I, I, I, heads=1)
        out = hd_repssa_s(np.array([[3.0]]), p, build_hdm(1, 1), neuron(1), neuron(1))
        assert out.data.tolist() == [[3.0]]

    def test_neutral_mask_limit(self):
        rng = np.random.default_rng(2)
        X = random_spikes(rng, 5, 4)
        p = random_params(rng, 4, 1, scale=0.1)
        a = hd_repssa_s(X, p, None, neuron(4), neuron(4), return_maps=True)[1]
        b = hd_repssa_s(X, p, build_hdm(5, 1, phi=1 - 1e-12), neuron(4), neuron(4), return_maps=True)[1]
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_maps_rows_are_distributions(self):
        rng = np.random.default_rng(3)
        X = rng.integers(0, T + 1, size=(2, 5, 4)).astype(float)
        p = random_params(rng, 4, 2)
        _, maps = hd_repssa_s(X, p, build_hdm(5, 1), neuron(4), neuron(4), [5, 3], return_maps=True)
        np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(maps[1, :, :, 3:], 0.0)

    def test_permutation_equivariance_without_mask(self):
        rng = np.random.default_rng(4)
        X = random_spikes(rng, 6, 4)
        p = random_params(rng, 4, 2, scale=0.3)
        perm = rng.permutation(6)
        a = hd_repssa_s(X, p, None, neuron(4), neuron(4)).data
        b = hd_repssa_s(X[perm], p, None, neuron(4), neuron(4)).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_mask_breaks_equivariance(self):
        rng = np.random.default_rng(5)
        X = random_spikes(rng, 8, 4)
        p = random_params(rng, 4, 1, scale=0.3)
        perm = np.roll(np.arange(8), 3)
        _, a = hd_repssa_s(X, p, build_hdm(8, 1), neuron(4), neuron(4), return_maps=True)
        _, b = hd_repssa_s(X[perm], p, build_hdm(8, 1), neuron(4), neuron(4), return_maps=True)
        assert not np.allclose(b[0, 0], a[0, 0][np.ix_(perm, perm)])

    def test_mask_length_mismatch(self):
        p = random_params(np.random.default_rng(0), 4, 1)
        with pytest.raises(DimensionError):
            hd_repssa_s(np.zeros((3, 4)), p, build_hdm(4, 1), neuron(4), neuron(4))


class TestLinearVariant:
    def test_matches_reference(self):
        rng = np.random.default_rng(6)
        X = random_spikes(rng, 5, 4)
        p = random_params(rng, 4, 1, scale=0.1)
        mask = build_hdm(5, 1)
        A = (X @ p.W_Q.data) @ (X @ p.W_K.data).T * mask.values
        want = sn(A @ sn(X @ p.W_V.data)) @ p.W_out.data
        got = hd_repssa_l(X, p, mask, neuron(4), neuron(4)).data
        np.testing.assert_allclose(got, want, rtol=1e-9)

    def test_padding_does_not_leak(self):
        rng = np.random.default_rng(7)
        X = random_spikes(rng, 6, 4)
        p = random_params(rng, 4, 2, scale=0.1)
        padded = X.copy()
        padded[4:] = T
        a = hd_repssa_l(X[:4], p, None, neuron(4), neuron(4)).data
        b = hd_repssa_l(padded[None], p, None, neuron(4), neuron(4), [4]).data[0, :4]
        np.testing.assert_allclose(b, a, atol=1e-12)


class TestSdsa3:
    def test_association_order_is_irrelevant(self):
        rng = np.random.default_rng(8)
        X = random_spikes(rng, 7, 4)
        p = random_params(rng, 4, 2)
        Q, K, V = (sn(X @ w.data) for w in (p.W_Q, p.W_K, p.W_V))
        heads = [(Q[:, c] @ K[:, c].T) @ V[:, c] for c in (slice(0, 2), slice(2, 4))]
        want = sn(np.concatenate(heads, axis=1)) @ p.W_out.data
        got = sdsa3(X, p, neuron(4), neuron(4), neuron(4), neuron(4)).data
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestChannelMlp:
    def test_hand_chain(self):
        out = channel_mlp(np.array([[2.5, 9.0]]), ad.Tensor(np.eye(2)), ad.Tensor(np.eye(2)),
                          neuron(2), neuron(2))
        assert out.data.tolist() == [[2.0, 4.0]]

    def test_zero_weights(self):
        out = channel_mlp(np.ones((3, 2)), ad.Tensor(np.zeros((2, 5))), ad.Tensor(np.zeros((5, 2))),
                          neuron(2), neuron(5))
        np.testing.assert_array_equal(out.data, 0.0)
