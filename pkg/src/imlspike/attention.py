"""Spiking self-attention variants and the spiking channel MLP.

All functions take spike inputs shaped ``[B, N, D]`` (a 2-D ``[N, D]`` input
is treated as a batch of one) and return tape tensors. Attention logits are
real valued; every SN site is a :class:`~imlspike.neuron.SpikingNeuron`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, PreconditionError


def decay_factor(layer_index: int) -> float:
    """Per-layer decay base, ``1 - 2**(-5 - l)`` for 1-based ``l``."""
    if layer_index < 1:
        raise PreconditionError("layer index is 1-based")
    return 1.0 - 2.0 ** (-5 - layer_index)


@dataclass(frozen=True)
class DecayMask:
    layer_index: int
    phi: float
    values: np.ndarray

    @property
    def seq_len(self) -> int:
        return self.values.shape[0]


def build_hdm(seq_len: int, layer_index: int, phi: float | None = None) -> DecayMask:
    """``H[i, j] = phi ** |i - j|``; ``phi`` defaults to the layer's decay factor."""
    if seq_len < 1:
        raise PreconditionError("seq_len must be >= 1")
    if phi is None:
        phi = decay_factor(layer_index)
    idx = np.arange(seq_len)
    dist = np.abs(idx[:, None] - idx[None, :])
    return DecayMask(layer_index, phi, np.power(phi, dist, dtype=np.float64))


@dataclass
class AttentionParams:
    W_Q: ad.Tensor
    W_K: ad.Tensor
    W_V: ad.Tensor
    W_out: ad.Tensor
    heads: int

    def __post_init__(self):
        D = self.W_Q.shape[0]
        if D % self.heads:
            raise DimensionError(f"width {D} is not divisible by {self.heads} heads")

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1] // self.heads


@dataclass
class FusedAttentionParams:
    W_QK: ad.Tensor  # [H, D, D]
    W_V: ad.Tensor
    W_out: ad.Tensor
    heads: int

    @property
    def d_k(self) -> int:
        return self.W_V.shape[1] // self.heads


def rep_fuse(p: AttentionParams) -> FusedAttentionParams:
    """Per head, ``W_QK[h] = W_Q[:, h] @ W_K[:, h].T``."""
    dk = p.d_k
    blocks = []
    for h in range(p.heads):
        cols = slice(h * dk, (h + 1) * dk)
        blocks.append(p.W_Q.data[:, cols] @ p.W_K.data[:, cols].T)
    return FusedAttentionParams(ad.Tensor(np.stack(blocks), name="W_QK"),
                                p.W_V, p.W_out, p.heads)


def _batched(x) -> tuple[ad.Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [N, D] or [B, N, D], got {x.shape}")
    return x, False


def _split_heads(x: ad.Tensor, heads: int) -> ad.Tensor:
    B, N, D = x.shape
    return ad.transpose(ad.reshape(x, (B, N, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: ad.Tensor) -> ad.Tensor:
    B, H, N, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, N, H * dk))


def _valid(B: int, N: int, valid_lengths) -> np.ndarray:
    if valid_lengths is None:
        return np.ones((B, N), dtype=bool)
    lengths = np.asarray(valid_lengths)
    if lengths.shape != (B,):
        raise DimensionError(f"expected {B} valid lengths, got {lengths.shape}")
    return np.arange(N)[None, :] < lengths[:, None]


def attn_logits(X_s, params, mode: str = "factored") -> ad.Tensor:
    """Per-head logits ``[B, H, N, N]`` (``[H, N, N]`` for unbatched input)."""
    X, squeeze = _batched(X_s)
    B, N, D = X.shape
    if mode == "factored":
        if not isinstance(params, AttentionParams):
            raise PreconditionError("factored mode needs AttentionParams")
        Q = _split_heads(X @ params.W_Q, params.heads)
        K = _split_heads(X @ params.W_K, params.heads)
        A = Q @ ad.transpose(K, (0, 1, 3, 2))
    elif mode == "fused":
        if not isinstance(params, FusedAttentionParams):
            raise PreconditionError("fused mode needs FusedAttentionParams")
        X4 = ad.reshape(X, (B, 1, N, D))
        A = (X4 @ params.W_QK) @ ad.transpose(X4, (0, 1, 3, 2))
    else:
        raise PreconditionError(f"unknown logits mode {mode!r}")
    return ad.reshape(A, A.shape[1:]) if squeeze else A


def _logits_for(X, params) -> ad.Tensor:
    mode = "fused" if isinstance(params, FusedAttentionParams) else "factored"
    return attn_logits(X, params, mode)


def hd_repssa_s(X_s, params, mask: DecayMask | None, v_neuron, out_neuron,
                valid_lengths=None, return_maps: bool = False):
    """Softmax variant: ``SN(softmax((A * H) / sqrt(d_k)) V_s) W_out``.

    ``mask=None`` gives plain RepSSA. Padded keys get ``-inf`` logits.
    """
    X, squeeze = _batched(X_s)
    B, N, D = X.shape
    valid = _valid(B, N, valid_lengths)
    A = _logits_for(X, params)
    if mask is not None:
        if mask.seq_len != N:
            raise DimensionError(f"mask built for length {mask.seq_len}, input has {N}")
        A = ad.mask_mul(A, mask.values)
    key_bias = np.where(valid, 0.0, -np.inf)[:, None, None, :]
    S = ad.softmax(ad.scale(A, 1.0 / math.sqrt(params.d_k)) + key_bias)
    V_s = v_neuron(X @ params.W_V, valid_lengths)
    mixed = _merge_heads(S @ _split_heads(V_s, params.heads))
    out = out_neuron(mixed, valid_lengths) @ params.W_out
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return (out, S.data) if return_maps else out


def hd_repssa_l(X_s, params, mask: DecayMask | None, v_neuron, out_neuron,
                valid_lengths=None, return_maps: bool = False):
    """Linear variant: ``SN((A * H) V_s) W_out``; padded value rows are zeroed."""
    X, squeeze = _batched(X_s)
    B, N, D = X.shape
    valid = _valid(B, N, valid_lengths)
    A = _logits_for(X, params)
    if mask is not None:
        if mask.seq_len != N:
            raise DimensionError(f"mask built for length {mask.seq_len}, input has {N}")
        A = ad.mask_mul(A, mask.values)
    V_s = ad.mask_mul(v_neuron(X @ params.W_V, valid_lengths), valid[:, :, None])
    mixed = _merge_heads(A @ _split_heads(V_s, params.heads))
    out = out_neuron(mixed, valid_lengths) @ params.W_out
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    if return_maps:
        return out, A.data * valid[:, None, None, :]
    return out


def sdsa3(X_s, params: AttentionParams, q_neuron, k_neuron, v_neuron, out_neuron,
          valid_lengths=None) -> ad.Tensor:
    """Spike-driven baseline: ``SN(Q_s (K_s^T V_s)) W_out`` without batch norm."""
    X, squeeze = _batched(X_s)
    B, N, D = X.shape
    valid = _valid(B, N, valid_lengths)[:, :, None]
    Q_s = q_neuron(X @ params.W_Q, valid_lengths)
    K_s = ad.mask_mul(k_neuron(X @ params.W_K, valid_lengths), valid)
    V_s = ad.mask_mul(v_neuron(X @ params.W_V, valid_lengths), valid)
    Kh = _split_heads(K_s, params.heads)
    KV = ad.transpose(Kh, (0, 1, 3, 2)) @ _split_heads(V_s, params.heads)
    mixed = _merge_heads(_split_heads(Q_s, params.heads) @ KV)
    out = out_neuron(mixed, valid_lengths) @ params.W_out
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def channel_mlp(X, W1, W2, in_neuron, hidden_neuron, valid_lengths=None) -> ad.Tensor:
    """``SN(SN(X) W1) W2``."""
    X, squeeze = _batched(X)
    h = hidden_neuron(in_neuron(X, valid_lengths) @ W1, valid_lengths)
    out = h @ W2
    return ad.reshape(out, out.shape[1:]) if squeeze else out
