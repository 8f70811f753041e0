"""Additive attention over (quantized) encoder states.

Scores: v . tanh(W_e e_i + W_d h_prev + b) per source position, masked to
-1e30 beyond the valid length, softmax-normalized; the context vector is
the weight-averaged code row.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

MASK_VALUE = -1e30


class AttentionParams:
    """v [Da,1], W_e [D,Da], W_d [H,Da], b [Da]."""

    def __init__(self, W_e, W_d, b, v):
        self.W_e = W_e
        self.W_d = W_d
        self.b = b
        self.v = v

    @classmethod
    def init(cls, code_dim, dec_hidden, attn_dim, rng, scale=0.08, store=None, prefix="attn."):
        def param(name, shape):
            t = Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
            if store is not None:
                store.add(prefix + name, t)
            return t

        return cls(
            W_e=param("W_e", (code_dim, attn_dim)),
            W_d=param("W_d", (dec_hidden, attn_dim)),
            b=param("b", (attn_dim,)),
            v=param("v", (attn_dim, 1)),
        )


def attention_weights_batch(params, codes, dec_prev, lengths):
    """Batched weights: codes [B,T,D], dec_prev [B,H], lengths [B] -> [B,T]."""
    B, T, _ = codes.data.shape
    lengths = np.asarray(lengths)
    if (lengths < 1).any() or (lengths > T).any():
        raise ContractViolation("valid lengths must be in 1..T")
    pre = ad.tanh(codes @ params.W_e + ad.reshape(dec_prev @ params.W_d, (B, 1, -1)) + params.b)
    scores = ad.reshape(pre @ params.v, (B, T))
    mask = np.where(np.arange(T)[None, :] < lengths[:, None], 0.0, MASK_VALUE)
    return ad.softmax(scores + mask)


def attention_weights(params, codes, dec_prev, valid_len):
    """Single-sequence weights: codes [T,D], dec_prev [H] -> alpha [T]."""
    if valid_len == 0:
        raise ContractViolation("no attendable positions")
    codes_b = ad.reshape(codes, (1,) + tuple(codes.data.shape))
    dec_b = ad.reshape(dec_prev, (1, -1))
    alpha = attention_weights_batch(params, codes_b, dec_b, np.array([valid_len]))
    return ad.reshape(alpha, (codes.data.shape[0],))


def context_vector(alpha, codes):
    """c = sum_i alpha_i e_i; lies in the convex hull of code rows."""
    total = float(alpha.data.sum())
    if abs(total - 1.0) > 1e-9:
        raise ContractViolation("attention weights must sum to 1")
    T = alpha.data.shape[0]
    return ad.reshape(ad.reshape(alpha, (1, T)) @ codes, (codes.data.shape[1],))


def context_vector_batch(alpha, codes):
    """Batched contexts: alpha [B,T], codes [B,T,D] -> [B,D]."""
    B, T = alpha.data.shape
    ctx = ad.reshape(alpha, (B, 1, T)) @ codes
    return ad.reshape(ctx, (B, codes.data.shape[2]))
