"""Discrete latent space: codebook, nearest-neighbor posterior, the
straight-through gradient path, and K-means/EMA codebook updates.

Code indices are 0-based (0..K-1).  The codebook never learns through
gradients: its vectors only appear behind stop_gradient, and are moved by
per-batch cluster means smoothed with an exponential moving average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation


@dataclass
class CodeBook:
    vectors: Tensor            # [K, D], requires_grad so zero-grad is checkable
    ema_decay: float = 0.99
    ema_counts: np.ndarray = None
    dead_threshold: float = 1.0

    def __post_init__(self):
        if self.K < 2:
            raise ContractViolation("codebook needs K >= 2")
        if not np.isfinite(self.vectors.data).all():
            raise ContractViolation("codebook vectors must be finite")
        if self.ema_counts is None:
            self.ema_counts = np.zeros(self.K)

    @property
    def K(self):
        return self.vectors.data.shape[0]

    @property
    def D(self):
        return self.vectors.data.shape[1]


def init_codebook(hidden, K, rng, ema_decay=0.99, dead_threshold=1.0):
    """Seed K codes by sampling rows of the first batch's encoder states
    (a one-step K-means seeding that avoids early dead codes)."""
    hidden = np.asarray(hidden, dtype=np.float64)
    idx = rng.choice(hidden.shape[0], size=K, replace=hidden.shape[0] < K)
    vectors = Tensor(hidden[idx].copy(), requires_grad=True)
    return CodeBook(vectors=vectors, ema_decay=ema_decay, dead_threshold=dead_threshold)


@dataclass
class QuantizeResult:
    indices: np.ndarray      # [T] code ids in 0..K-1
    quantized: Tensor        # [T, D]; row t equals vectors[indices[t]] exactly
    commit_term: Tensor      # scalar: sum_t ||h_t - sg(e_{z_t})||^2 (mask applied)


def nearest_codes(book, hidden):
    """argmin_j ||h_t - e_j||_2 per row, ties broken by smallest index."""
    hidden = np.asarray(hidden, dtype=np.float64)
    diff = hidden[:, None, :] - book.vectors.data[None, :, :]
    d2 = np.einsum("tkd,tkd->tk", diff, diff)
    return np.argmin(d2, axis=1)


def quantize(book, hidden, mask=None):
    """Quantize rows of ``hidden`` ([T, D] Tensor or array) against the book.

    ``mask`` (optional [T] 0/1 array) drops rows from the commitment term;
    masked rows still get indices so callers can ignore them downstream.
    """
    h = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    if h.data.ndim != 2 or h.data.shape[1] != book.D:
        raise ContractViolation(
            f"hidden must be [T, {book.D}], got {h.data.shape}"
        )
    if not np.isfinite(h.data).all():
        raise ContractViolation("hidden states must be finite")
    indices = nearest_codes(book, h.data)
    quantized = ad.gather_rows(book.vectors, indices)
    diff = h - ad.stop_gradient(quantized)
    per_row = ad.tsum(diff * diff, axis=1)
    if mask is not None:
        per_row = per_row * np.asarray(mask, dtype=np.float64)
    return QuantizeResult(indices=indices, quantized=quantized, commit_term=ad.tsum(per_row))


def straight_through(hidden, quantized):
    """Forward: exactly ``quantized``.  Backward: identity into ``hidden``,
    nothing into the codebook.  hidden + sg(quantized - hidden)."""
    if hidden.data.shape != quantized.data.shape:
        raise ContractViolation("straight_through needs equal shapes")
    return hidden + ad.stop_gradient(ad.sub(quantized, hidden))


def ema_update(book, hidden, indices):
    """Move each assigned code toward its batch cluster mean.

    e_k <- g*e_k + (1-g)*mean_k and counts <- g*counts + (1-g)*n_k for
    codes with n_k >= 1; unassigned codes are untouched.  Pure numpy: no
    gradient flows through this procedure.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    indices = np.asarray(indices)
    g = book.ema_decay
    counts = np.bincount(indices, minlength=book.K).astype(np.float64)
    sums = np.zeros_like(book.vectors.data)
    np.add.at(sums, indices, hidden)
    assigned = counts >= 1.0
    means = np.where(assigned[:, None], sums / np.maximum(counts, 1.0)[:, None], 0.0)
    book.vectors.data[assigned] = g * book.vectors.data[assigned] + (1.0 - g) * means[assigned]
    book.ema_counts[assigned] = g * book.ema_counts[assigned] + (1.0 - g) * counts[assigned]


def revive_dead_codes(book, hidden_pool, rng):
    """Reassign codes whose EMA count fell below the threshold to random
    rows of ``hidden_pool``; returns how many codes were revived."""
    pool = np.asarray(hidden_pool, dtype=np.float64)
    if pool.size == 0:
        raise ContractViolation("hidden_pool must be nonempty")
    dead = np.flatnonzero(book.ema_counts < book.dead_threshold)
    for k in dead:
        row = rng.integers(0, pool.shape[0])
        book.vectors.data[k] = pool[row]
        book.ema_counts[k] = 1.0
    return len(dead)


def codebook_report(book):
    """Per-code (id, ema_count, l2_norm, nearest_other) rows for inspection."""
    vecs = book.vectors.data
    diff = vecs[:, None, :] - vecs[None, :, :]
    d2 = np.einsum("ijd,ijd->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    nearest = np.argmin(d2, axis=1)
    rows = []
    for k in range(book.K):
        rows.append((k, float(book.ema_counts[k]), float(np.linalg.norm(vecs[k])), int(nearest[k])))
    return rows
