"""Scikit-learn style facades over the training harness.

``fit`` consumes a list/array of raw sentences (whitespace-tokenized),
carves off a seeded validation split, and runs the full pipeline; the
fitted object exposes perplexity-based scoring and sampling.  All the
real machinery lives in :mod:`dvam.training`; these classes exist so the
models drop into sklearn tooling (``clone``, ``get_params``, pipelines).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ContractViolation, DataFormatError
from .training import TrainConfig, evaluate, generate, train_dvam, train_gvam, train_prior


def _as_lines(X):
    lines = [str(x) for x in np.asarray(X, dtype=object).reshape(-1)]
    if not lines:
        raise DataFormatError("empty corpus")
    if any(not ln.strip() for ln in lines):
        raise DataFormatError("blank lines are not valid sentences")
    return lines


class _BaseLM(BaseEstimator):
    def _config(self):
        return TrainConfig(
            embed_dim=self.embed_dim, enc_hidden=self.enc_hidden,
            dec_hidden=self.dec_hidden, code_dim=self.code_dim,
            code_count=self.code_count, lr=self.lr, batch_size=self.batch_size,
            max_epochs=self.max_epochs, warmup_epochs=self.warmup_epochs,
            ramp_epochs=self.ramp_epochs, prior_channels=self.prior_channels,
            prior_layers=self.prior_layers, prior_epochs=self.prior_epochs,
            prior_lr=self.prior_lr, max_gen_len=self.max_gen_len, seed=self.seed,
        )

    def _split(self, lines):
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractViolation("val_fraction must be in (0, 1)")
        order = np.random.default_rng(self.seed).permutation(len(lines))
        n_val = max(1, int(round(self.val_fraction * len(lines))))
        if n_val >= len(lines):
            raise DataFormatError("corpus too small for the validation split")
        val = [lines[i] for i in order[:n_val]]
        train = [lines[i] for i in order[n_val:]]
        return {"train": train, "val": val}

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise ContractViolation("estimator is not fitted")

    def score(self, X, y=None):
        """Mean negative per-token reconstruction NLL (higher is better)."""
        return -np.log(self.perplexity(X))

    def perplexity(self, X):
        self._check_fitted()
        m = evaluate(self.checkpoint_, getattr(self, "prior_", None), _as_lines(X))
        return m.ppl

    def sample(self, n, temperature=1.0, seed=0):
        self._check_fitted()
        return generate(self.checkpoint_, getattr(self, "prior_", None),
                        n, temperature, seed)


class DiscreteVariationalAttentionLM(_BaseLM):
    """Two-stage discrete model: quantized-attention stage, then the
    autoregressive code prior."""

    def __init__(self, embed_dim=64, enc_hidden=64, dec_hidden=64, code_dim=16,
                 code_count=512, lr=1.0, batch_size=32, max_epochs=50,
                 warmup_epochs=30, ramp_epochs=10, prior_channels=256,
                 prior_layers=16, prior_epochs=50, prior_lr=0.1,
                 max_gen_len=64, seed=0, val_fraction=0.1):
        self.embed_dim = embed_dim
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.code_dim = code_dim
        self.code_count = code_count
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.warmup_epochs = warmup_epochs
        self.ramp_epochs = ramp_epochs
        self.prior_channels = prior_channels
        self.prior_layers = prior_layers
        self.prior_epochs = prior_epochs
        self.prior_lr = prior_lr
        self.max_gen_len = max_gen_len
        self.seed = seed
        self.val_fraction = val_fraction

    def fit(self, X, y=None):
        config = self._config()
        splits = self._split(_as_lines(X))
        self.checkpoint_, self.history_ = train_dvam(config, splits)
        self.prior_, self.prior_history_, self.prior_nll_ = train_prior(
            config, self.checkpoint_, splits)
        return self


class GaussianVariationalAttentionLM(_BaseLM):
    """Jointly trained Gaussian baseline (posterior, decoder, and
    continuous autoregressive prior in one stage)."""

    def __init__(self, embed_dim=64, enc_hidden=64, dec_hidden=64, code_dim=16,
                 code_count=512, lr=1.0, batch_size=32, max_epochs=50,
                 warmup_epochs=30, ramp_epochs=10, prior_channels=256,
                 prior_layers=16, prior_epochs=50, prior_lr=0.1,
                 max_gen_len=64, seed=0, val_fraction=0.1):
        self.embed_dim = embed_dim
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.code_dim = code_dim
        self.code_count = code_count
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.warmup_epochs = warmup_epochs
        self.ramp_epochs = ramp_epochs
        self.prior_channels = prior_channels
        self.prior_layers = prior_layers
        self.prior_epochs = prior_epochs
        self.prior_lr = prior_lr
        self.max_gen_len = max_gen_len
        self.seed = seed
        self.val_fraction = val_fraction

    def fit(self, X, y=None):
        config = self._config()
        splits = self._split(_as_lines(X))
        self.checkpoint_, self.history_ = train_gvam(config, splits)
        return self
