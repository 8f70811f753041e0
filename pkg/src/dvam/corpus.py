"""Text ingestion: vocabulary, tokenization, and length-bucketed batching.

Corpora are UTF-8 plain text, one pre-tokenized sentence per line, split
on whitespace.  Reserved ids are fixed: 0=PAD, 1=UNK, 2=BOS, 3=EOS.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ["<pad>", "<unk>", "<s>", "</s>"]


class Vocabulary:
    def __init__(self, tokens):
        """``tokens``: non-reserved tokens in id order (id = 4 + position)."""
        self.id_to_token = RESERVED_TOKENS + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataFormatError("duplicate token in vocabulary")

    @property
    def size(self):
        return len(self.id_to_token)

    def lookup(self, token):
        return self.token_to_id.get(token, UNK)

    def token(self, idx):
        return self.id_to_token[idx]


@dataclass
class TokenSeq:
    ids: list  # ends with EOS, no interior PAD

    @property
    def length(self):
        return len(self.ids)


@dataclass
class Batch:
    ids: np.ndarray       # [B, T_max] int64, PAD beyond each row's length
    lengths: np.ndarray   # [B] true lengths (EOS included, PAD excluded)

    @property
    def size(self):
        return self.ids.shape[0]

    @property
    def max_len(self):
        return self.ids.shape[1]


def build_vocab(train_lines, max_size=20000, min_freq=1):
    """Keep the most frequent whitespace tokens, ties broken lexicographically."""
    counts = Counter()
    seen_any = False
    for line in train_lines:
        toks = line.split()
        if toks:
            seen_any = True
        counts.update(toks)
    if not seen_any:
        raise DataFormatError("empty corpus")
    eligible = [(tok, n) for tok, n in counts.items() if n >= min_freq]
    eligible.sort(key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in eligible[: max(0, max_size - 4)]]
    return Vocabulary(kept)


def encode_line(vocab, line):
    """Map tokens to ids, UNK for unknowns, EOS appended.  BOS is not stored;
    the decoder injects it as its first input."""
    ids = [vocab.lookup(tok) for tok in line.split()]
    ids.append(EOS)
    return TokenSeq(ids)


def decode_ids(vocab, ids):
    """Inverse of encode_line for display: drops the trailing EOS and PAD."""
    toks = []
    for i in ids:
        if i == PAD:
            continue
        if i == EOS:
            break
        toks.append(vocab.token(i))
    return " ".join(toks)


def make_batches(seqs, batch_size, shuffle_seed=None):
    """Bucket by length (stable sort, consecutive slices) to limit padding;
    with a seed the bucket order is shuffled deterministically."""
    if batch_size < 1:
        raise DataFormatError("batch_size must be >= 1")
    order = sorted(range(len(seqs)), key=lambda i: (seqs[i].length, i))
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(groups)
    batches = []
    for group in groups:
        lengths = np.array([seqs[i].length for i in group], dtype=np.int64)
        t_max = int(lengths.max())
        ids = np.full((len(group), t_max), PAD, dtype=np.int64)
        for row, i in enumerate(group):
            ids[row, : seqs[i].length] = seqs[i].ids
        batches.append(Batch(ids=ids, lengths=lengths))
    return batches


def target_mask(batch):
    """[B, T_max] float64, 1 at real target positions (EOS included)."""
    positions = np.arange(batch.max_len)
    return (positions[None, :] < batch.lengths[:, None]).astype(np.float64)


def average_length(lines):
    """Direct line-by-line mean token count (EOS excluded), for corpus stats."""
    lens = [len(line.split()) for line in lines]
    if not lens:
        raise DataFormatError("empty corpus")
    return sum(lens) / len(lens)


def write_vocab_file(vocab, path):
    """One token per line; a fixed 4-line reserved header precedes the rest."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_vocab(vocab))


def format_vocab(vocab):
    return "\n".join(vocab.id_to_token) + "\n"


def read_vocab_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_vocab(fh.read())


def parse_vocab(text):
    lines = text.splitlines()
    if lines[:4] != RESERVED_TOKENS:
        raise DataFormatError("vocabulary file lacks the reserved-token header")
    return Vocabulary(lines[4:])


def read_corpus_dir(path):
    """Load train/valid/test line lists from a corpus directory."""
    import os

    splits = {}
    for split, fname in (("train", "train.txt"), ("val", "valid.txt"), ("test", "test.txt")):
        fpath = os.path.join(path, fname)
        if not os.path.exists(fpath):
            if split == "train":
                raise DataFormatError(f"missing {fname} in corpus dir {path}")
            continue
        with open(fpath, encoding="utf-8") as fh:
            splits[split] = [line.rstrip("\n") for line in fh if line.strip()]
    return splits
