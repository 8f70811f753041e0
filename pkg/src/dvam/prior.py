"""Autoregressive priors over the latent sequence.

``PriorNet`` is a residual causal 1-D convolutional network over code
indices, trained by cross entropy on grids produced by a frozen model;
ancestral sampling drives generation.  ``GaussianPriorNet`` shares the
conv stack but consumes continuous latents and emits per-position
Gaussian parameters for the jointly trained baseline.

Code symbols are 0-based: real codes 0..K-1, PAD-code = K (the learned
terminator class), BOS-code = K+1 (input only).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ContractViolation, DataFormatError

GRID_MAGIC = b"DVMC"
GRID_VERSION = 1


@dataclass
class PriorConfig:
    code_count: int
    channels: int = 256
    layers: int = 16
    kernel: int = 3

    @property
    def pad_code(self):
        return self.code_count

    @property
    def bos_code(self):
        return self.code_count + 1

    @property
    def receptive_field(self):
        return 1 + self.layers * (self.kernel - 1)


class _CausalConvStack:
    """Shared residual stack: x <- x + tanh(causal_conv(x)) per layer."""

    def __init__(self, config, rng, store, prefix, scale=0.08):
        self.config = config
        self.store = store
        self.prefix = prefix
        C, k = config.channels, config.kernel
        for i in range(config.layers):
            for j in range(k):
                store.add(f"{prefix}block{i}.W{j}",
                          Tensor(rng.uniform(-scale, scale, size=(C, C)), requires_grad=True))
            store.add(f"{prefix}block{i}.b", Tensor(np.zeros(C), requires_grad=True))

    def __call__(self, x):
        B, T, C = x.data.shape
        k = self.config.kernel
        for i in range(self.config.layers):
            # out[t] = sum_s shifted(x, s) @ W_s + b, left-padded with zeros
            acc = None
            for s in range(k):
                w = self.store[f"{self.prefix}block{i}.W{s}"]
                if s == 0:
                    shifted = x
                elif s >= T:
                    continue  # shift exceeds the sequence; contributes zeros
                else:
                    pad = Tensor(np.zeros((B, s, C)))
                    shifted = ad.concat([pad, x[:, : T - s, :]], axis=1)
                term = shifted @ w
                acc = term if acc is None else acc + term
            x = x + ad.tanh(acc + self.store[f"{self.prefix}block{i}.b"])
        return x


class PriorNet:
    """Categorical prior over code grids; strictly causal by construction."""

    def __init__(self, config, rng, store=None, prefix="prior.", scale=0.08):
        self.config = config
        self.params = store if store is not None else ParamStore()
        self.prefix = prefix
        K, C = config.code_count, config.channels
        self.params.add(prefix + "embed",
                        Tensor(rng.uniform(-scale, scale, size=(K + 2, C)), requires_grad=True))
        self.stack = _CausalConvStack(config, rng, self.params, prefix)
        self.params.add(prefix + "out.W",
                        Tensor(rng.uniform(-scale, scale, size=(C, K + 1)), requires_grad=True))
        self.params.add(prefix + "out.b", Tensor(np.zeros(K + 1), requires_grad=True))


def prior_logits(net, grids):
    """Logits [B, T, K+1]; position t parameterizes p(z_t | z_{<t}).

    The input at position t is z_{t-1} (BOS-code at t=0), so causality
    holds exactly: perturbing grid position t only moves logits past t.
    """
    grids = np.asarray(grids, dtype=np.int64)
    B, T = grids.shape
    cfg = net.config
    inputs = np.concatenate(
        [np.full((B, 1), cfg.bos_code, dtype=np.int64), grids[:, :-1]], axis=1
    )
    x = ad.gather_rows(net.params[net.prefix + "embed"], inputs)
    x = net.stack(x)
    return x @ net.params[net.prefix + "out.W"] + net.params[net.prefix + "out.b"]


def grid_position_mask(grids, pad_code):
    """1.0 at positions up to and including the first PAD-code, else 0."""
    grids = np.asarray(grids)
    is_pad = grids == pad_code
    before = np.cumsum(is_pad, axis=1) - is_pad
    return (before == 0).astype(np.float64)


def prior_nll(net, grids):
    """Cross entropy -sum log p(z_t | z_{<t}) over effective positions.

    The first PAD-code is predicted once as the terminator; positions
    after it carry no loss.  Returns (scalar Tensor, effective position
    count).
    """
    grids = np.asarray(grids, dtype=np.int64)
    B, T = grids.shape
    logits = prior_logits(net, grids)
    mask = grid_position_mask(grids, net.config.pad_code)
    lp = ad.log_softmax(ad.reshape(logits, (B * T, net.config.code_count + 1)))
    picked = ad.select_last(lp, grids.reshape(-1))
    nll = -ad.tsum(picked * mask.reshape(-1))
    return nll, int(mask.sum())


def sample_codes(net, t_max, temperature, rng):
    """Ancestral sampling left to right; stops at the first PAD-code.

    PAD is masked out at position 0 (training grids always hold at least
    one real code).  Logits are divided by the temperature before the
    softmax; the temperature -> 0 limit is greedy argmax.
    """
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    cfg = net.config
    codes = []
    for t in range(t_max):
        grid = np.array([codes + [0]], dtype=np.int64)
        logits = prior_logits(net, grid).data[0, t].copy()
        if t == 0:
            logits[cfg.pad_code] = -np.inf
        scaled = (logits - logits.max()) / temperature
        probs = np.exp(scaled)
        probs /= probs.sum()
        pick = int(rng.choice(cfg.code_count + 1, p=probs))
        if pick == cfg.pad_code:
            break
        codes.append(pick)
    return codes


class GaussianPriorNet:
    """Same causal stack over continuous latents; emits per-position
    (mu_hat, sigma_hat) of dimension D each."""

    def __init__(self, config, latent_dim, rng, store=None, prefix="gprior.", scale=0.08):
        self.config = config
        self.latent_dim = latent_dim
        self.params = store if store is not None else ParamStore()
        self.prefix = prefix
        C = config.channels
        self.params.add(prefix + "in.W",
                        Tensor(rng.uniform(-scale, scale, size=(latent_dim, C)), requires_grad=True))
        self.params.add(prefix + "in.b", Tensor(np.zeros(C), requires_grad=True))
        self.params.add(prefix + "start",
                        Tensor(rng.uniform(-scale, scale, size=(1, 1, C)), requires_grad=True))
        self.stack = _CausalConvStack(config, rng, self.params, prefix)
        self.params.add(prefix + "out.W",
                        Tensor(rng.uniform(-scale, scale, size=(C, 2 * latent_dim)), requires_grad=True))
        self.params.add(prefix + "out.b", Tensor(np.zeros(2 * latent_dim), requires_grad=True))


def gaussian_prior_params(net, z, sigma_floor=1e-6):
    """Per-position prior parameters from the latent prefix: position t
    depends only on z_{<t} (learned start row at t=0)."""
    B, T, D = z.data.shape if isinstance(z, Tensor) else np.asarray(z).shape
    zt = z if isinstance(z, Tensor) else Tensor(z)
    x = zt @ net.params[net.prefix + "in.W"] + net.params[net.prefix + "in.b"]
    start = net.params[net.prefix + "start"]
    start_rows = ad.concat([start] * B, axis=0) if B > 1 else start
    u = ad.concat([start_rows, x[:, : T - 1, :]], axis=1)
    h = net.stack(u)
    out = h @ net.params[net.prefix + "out.W"] + net.params[net.prefix + "out.b"]
    mu_hat = out[:, :, :D]
    sigma_hat = ad.softplus(out[:, :, D:]) + sigma_floor
    return mu_hat, sigma_hat


def sample_gaussian_latents(net, t_len, rng, sigma_floor=1e-6):
    """Ancestral sampling of a continuous latent sequence [t_len, D]."""
    D = net.latent_dim
    z = np.zeros((1, t_len, D))
    for t in range(t_len):
        mu, sigma = gaussian_prior_params(net, Tensor(z[:, : t + 1, :]), sigma_floor)
        eps = rng.standard_normal(D)
        z[0, t] = mu.data[0, t] + sigma.data[0, t] * eps
    return z[0]


# code grid cache ----------------------------------------------------

def build_code_grids(model, book, seqs, batch_size=64):
    """Encode and quantize a corpus once into PAD-terminated grids
    [N, max_len + 1] (frozen posterior; order follows length bucketing)."""
    from . import corpus as cp
    from .model import encode
    from .quantizer import nearest_codes

    t_max = max(s.length for s in seqs) + 1
    rows = []
    for batch in cp.make_batches(seqs, batch_size):
        hidden = encode(model, batch).data
        for r in range(batch.size):
            n = int(batch.lengths[r])
            idx = nearest_codes(book, hidden[r, :n, :])
            row = np.full(t_max, book.K, dtype=np.int64)  # PAD-code = K
            row[:n] = idx
            rows.append(row)
    return np.stack(rows, axis=0)


def write_code_grids(path, grids, code_count):
    grids = np.asarray(grids, dtype=np.int64)
    if grids.size and (grids.min() < 0 or grids.max() > code_count):
        raise DataFormatError("grid values out of range")
    count, t_max = grids.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<IIII", GRID_VERSION, code_count, t_max, count))
        fh.write(grids.astype("<u2").tobytes())


def read_code_grids(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRID_MAGIC:
        raise DataFormatError("bad code-grid magic")
    version, code_count, t_max, count = struct.unpack_from("<IIII", blob, 4)
    if version != GRID_VERSION:
        raise DataFormatError(f"unsupported code-grid version {version}")
    payload = blob[20:]
    expected = count * t_max * 2
    if len(payload) != expected:
        raise DataFormatError(f"truncated code-grid payload at offset {20 + len(payload)}")
    grids = np.frombuffer(payload, dtype="<u2").astype(np.int64).reshape(count, t_max)
    if grids.size and grids.max() > code_count:
        raise DataFormatError("grid values out of range")
    return grids, code_count
