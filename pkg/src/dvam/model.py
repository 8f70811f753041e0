"""Encoder/decoder LSTM pair with embeddings, attention, and output head.

The encoder runs left to right and projects its hidden states into code
space; the decoder is teacher-forced during training and free-running at
generation, attending over the (quantized or sampled) latent rows at
every step.  The context vector feeds both the LSTM input and the output
head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from .attention import AttentionParams, attention_weights_batch, context_vector_batch
from .autodiff import ParamStore, Tensor
from .errors import ContractViolation

INIT_SCALE = 0.08


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    enc_hidden: int = 64
    dec_hidden: int = 64
    code_dim: int = 16
    code_count: int = 512
    beta_max: float = 5.0
    attn_dim: int = 0  # 0 -> defaults to dec_hidden

    def __post_init__(self):
        if self.attn_dim == 0:
            self.attn_dim = self.dec_hidden
        for name in ("vocab_size", "embed_dim", "enc_hidden", "dec_hidden", "code_dim", "code_count", "attn_dim"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")


class Seq2SeqModel:
    """All named parameters live in a single ParamStore."""

    def __init__(self, config, rng, gaussian=False):
        self.config = config
        self.gaussian = gaussian
        self.params = ParamStore()
        c = config

        def param(name, shape):
            return self.params.add(name, Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape), requires_grad=True))

        param("embed", (c.vocab_size, c.embed_dim))
        param("enc.W", (c.embed_dim + c.enc_hidden, 4 * c.enc_hidden))
        enc_b = param("enc.b", (4 * c.enc_hidden,))
        enc_b.data[c.enc_hidden : 2 * c.enc_hidden] = 1.0  # forget-gate bias
        param("enc_proj.W", (c.enc_hidden, c.code_dim))
        param("enc_proj.b", (c.code_dim,))
        param("dec.W", (c.embed_dim + c.code_dim + c.dec_hidden, 4 * c.dec_hidden))
        dec_b = param("dec.b", (4 * c.dec_hidden,))
        dec_b.data[c.dec_hidden : 2 * c.dec_hidden] = 1.0
        self.attn = AttentionParams.init(c.code_dim, c.dec_hidden, c.attn_dim, rng, store=self.params)
        param("out.W", (c.dec_hidden + c.code_dim, c.vocab_size))
        param("out.b", (c.vocab_size,))
        if gaussian:
            param("post_mu.W", (c.code_dim, c.code_dim))
            param("post_mu.b", (c.code_dim,))
            param("post_sigma.W", (c.code_dim, c.code_dim))
            param("post_sigma.b", (c.code_dim,))


def lstm_cell(W, b, x, h, c):
    """Standard LSTM cell; gate slab order i, f, g, o."""
    H = h.data.shape[-1]
    z = ad.concat([x, h], axis=1) @ W + b
    i = ad.sigmoid(z[:, :H])
    f = ad.sigmoid(z[:, H : 2 * H])
    g = ad.tanh(z[:, 2 * H : 3 * H])
    o = ad.sigmoid(z[:, 3 * H :])
    c2 = f * c + i * g
    h2 = o * ad.tanh(c2)
    return h2, c2


def encode(model, batch):
    """Run the encoder and project to code space: [B, T_max, code_dim]."""
    c = model.config
    B, T = batch.ids.shape
    emb = ad.gather_rows(model.params["embed"], batch.ids)
    h = Tensor(np.zeros((B, c.enc_hidden)))
    cell = Tensor(np.zeros((B, c.enc_hidden)))
    states = []
    W, b = model.params["enc.W"], model.params["enc.b"]
    for t in range(T):
        h, cell = lstm_cell(W, b, emb[:, t, :], h, cell)
        states.append(h)
    hidden = ad.stack(states, axis=1)
    return hidden @ model.params["enc_proj.W"] + model.params["enc_proj.b"]


def decode_teacher_forced(model, codes, batch):
    """Teacher-forced decoding over latent rows ``codes`` [B, T, D].

    Step t sees the embedding of the previous gold token (BOS first), the
    attention context over all latent rows, and emits vocab logits from
    [h_t ; c_t].  Returns logits [B, T, vocab].
    """
    c = model.config
    B, T = batch.ids.shape
    prev_ids = np.concatenate([np.full((B, 1), cp.BOS, dtype=np.int64), batch.ids[:, :-1]], axis=1)
    emb = ad.gather_rows(model.params["embed"], prev_ids)
    h = Tensor(np.zeros((B, c.dec_hidden)))
    cell = Tensor(np.zeros((B, c.dec_hidden)))
    W, b = model.params["dec.W"], model.params["dec.b"]
    logits = []
    for t in range(T):
        alpha = attention_weights_batch(model.attn, codes, h, batch.lengths)
        ctx = context_vector_batch(alpha, codes)
        h, cell = lstm_cell(W, b, ad.concat([emb[:, t, :], ctx], axis=1), h, cell)
        out = ad.concat([h, ctx], axis=1) @ model.params["out.W"] + model.params["out.b"]
        logits.append(out)
    return ad.stack(logits, axis=1)


def reconstruction_loss(logits, batch):
    """Sum of -log p(target) over non-PAD positions, EOS included."""
    B, T, V = logits.data.shape
    if (B, T) != batch.ids.shape:
        raise ContractViolation("logits do not match batch")
    mask = cp.target_mask(batch).reshape(-1)
    lp = ad.log_softmax(ad.reshape(logits, (B * T, V)))
    picked = ad.select_last(lp, batch.ids.reshape(-1))
    return -ad.tsum(picked * mask)


@dataclass
class DvamLossResult:
    total: Tensor          # Rec + beta * commit
    rec: Tensor            # batch-sum reconstruction loss
    commit_term: Tensor    # batch-sum commitment term (PAD rows excluded)
    indices: np.ndarray    # [B, T] code ids (values at PAD rows are junk)
    hidden_rows: np.ndarray  # [B*T, D] encoder states (detached), for EMA
    row_mask: np.ndarray   # [B*T] 1.0 at real positions


def dvam_loss(model, book, batch, beta):
    """encode -> quantize -> straight-through -> decode -> Rec + beta*commit.

    The KL term is deliberately absent: with a one-hot posterior it is not
    differentiable in the model parameters, so it never enters stage-1
    optimization.
    """
    from .quantizer import quantize, straight_through

    if beta < 0:
        raise ContractViolation("beta must be >= 0")
    c = model.config
    B, T = batch.ids.shape
    hidden = encode(model, batch)
    flat = ad.reshape(hidden, (B * T, c.code_dim))
    row_mask = cp.target_mask(batch).reshape(-1)
    res = quantize(book, flat, mask=row_mask)
    codes = ad.reshape(straight_through(flat, res.quantized), (B, T, c.code_dim))
    logits = decode_teacher_forced(model, codes, batch)
    rec = reconstruction_loss(logits, batch)
    total = rec + beta * res.commit_term
    return DvamLossResult(
        total=total,
        rec=rec,
        commit_term=res.commit_term,
        indices=res.indices.reshape(B, T),
        hidden_rows=flat.data,
        row_mask=row_mask,
    )


def decode_free_running(model, codes, rng, temperature, max_len):
    """Sample one sentence conditioned on latent rows ``codes`` [T, D].

    The sampled token is fed back each step; vocab logits are divided by
    the temperature.  Stops after EOS or at ``max_len`` tokens.
    """
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    c = model.config
    T = codes.data.shape[0] if isinstance(codes, Tensor) else codes.shape[0]
    codes_b = codes if isinstance(codes, Tensor) else Tensor(codes)
    codes_b = ad.reshape(codes_b, (1, T, c.code_dim))
    lengths = np.array([T])
    h = Tensor(np.zeros((1, c.dec_hidden)))
    cell = Tensor(np.zeros((1, c.dec_hidden)))
    W, b = model.params["dec.W"], model.params["dec.b"]
    prev = cp.BOS
    out_ids = []
    for _ in range(max_len):
        emb = ad.gather_rows(model.params["embed"], np.array([prev]))
        alpha = attention_weights_batch(model.attn, codes_b, h, lengths)
        ctx = context_vector_batch(alpha, codes_b)
        h, cell = lstm_cell(W, b, ad.concat([emb, ctx], axis=1), h, cell)
        logits = (ad.concat([h, ctx], axis=1) @ model.params["out.W"] + model.params["out.b"]).data[0]
        scaled = logits / temperature
        scaled -= scaled.max()
        probs = np.exp(scaled)
        probs /= probs.sum()
        prev = int(rng.choice(len(probs), p=probs))
        out_ids.append(prev)
        if prev == cp.EOS:
            break
    return out_ids
