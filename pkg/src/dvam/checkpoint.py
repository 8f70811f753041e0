"""Versioned binary checkpoints: bit-exact round trips, no external
dependencies.

Layout: magic "DVAM", u32 format version, then three length-prefixed
sections (config text, vocabulary text, tensor records), each followed
by a CRC32 of its payload so any byte flip is detected, not just
truncation.  All integers are little-endian; all tensor data is 64-bit
reals.  Config text is sorted ``key = value`` lines with JSON-encoded
values, so identical state always serializes to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, Tensor
from .corpus import Vocabulary, format_vocab, parse_vocab
from .errors import DataFormatError
from .quantizer import CodeBook

MAGIC = b"DVAM"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str                     # "dvam" or "gvam"
    config: dict                  # flat training-config snapshot
    vocab: Vocabulary
    params: ParamStore
    codebook: CodeBook | None = None
    rng_state: dict = field(default_factory=dict)


def param_digest(params):
    """SHA-256 over (name, raw bytes) in name order; the stage-separation
    invariant is checked against this."""
    h = hashlib.sha256()
    for name in sorted(params.names()):
        h.update(name.encode())
        h.update(params[name].data.astype("<f8").tobytes())
    return h.hexdigest()


def _config_text(ckpt):
    entries = dict(ckpt.config)
    entries["kind"] = ckpt.kind
    entries["rng_state"] = ckpt.rng_state
    if ckpt.codebook is not None:
        entries["codebook.ema_decay"] = ckpt.codebook.ema_decay
        entries["codebook.dead_threshold"] = ckpt.codebook.dead_threshold
    lines = [f"{k} = {json.dumps(entries[k], sort_keys=True)}" for k in sorted(entries)]
    return "\n".join(lines) + "\n"


def _parse_config_text(text):
    entries = {}
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if " = " not in line:
            raise DataFormatError(f"malformed config line {ln}")
        key, _, raw = line.partition(" = ")
        entries[key] = json.loads(raw)
    return entries


def _tensor_blob(named):
    parts = [struct.pack("<Q", len(named))]
    for name, arr in named:
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _parse_tensor_blob(blob):
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(f"truncated tensor section: {what} at offset {off}")
        piece = blob[off : off + n]
        off += n
        return piece

    (count,) = struct.unpack("<Q", take(8, "record count"))
    named = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n, f"data of {name!r}"), dtype="<f8")
        named.append((name, data.reshape(dims).astype(np.float64)))
    if off != len(blob):
        raise DataFormatError(f"trailing bytes in tensor section at offset {off}")
    return named


def _write_section(fh, payload):
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def _read_section(blob, off, label):
    if off + 8 > len(blob):
        raise DataFormatError(f"truncated {label} section header at offset {off}")
    (n,) = struct.unpack_from("<Q", blob, off)
    start = off + 8
    if start + n + 4 > len(blob):
        raise DataFormatError(f"truncated {label} section at offset {start}")
    payload = blob[start : start + n]
    (crc,) = struct.unpack_from("<I", blob, start + n)
    if zlib.crc32(payload) != crc:
        raise DataFormatError(f"checksum mismatch in {label} section at offset {start}")
    return payload, start + n + 4


def save_checkpoint(ckpt, path):
    named = list((name, t.data) for name, t in ckpt.params.items())
    if ckpt.codebook is not None:
        named.append(("__codebook.vectors", ckpt.codebook.vectors.data))
        named.append(("__codebook.ema_counts", ckpt.codebook.ema_counts))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_section(fh, _config_text(ckpt).encode())
        _write_section(fh, format_vocab(ckpt.vocab).encode())
        _write_section(fh, _tensor_blob(named))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataFormatError("bad checkpoint magic at offset 0")
    if len(blob) < 8:
        raise DataFormatError("truncated checkpoint header at offset 4")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    off = 8
    config_raw, off = _read_section(blob, off, "config")
    vocab_raw, off = _read_section(blob, off, "vocabulary")
    tensor_raw, off = _read_section(blob, off, "tensor")
    if off != len(blob):
        raise DataFormatError(f"trailing bytes at offset {off}")

    entries = _parse_config_text(config_raw.decode())
    kind = entries.pop("kind")
    rng_state = entries.pop("rng_state")
    ema_decay = entries.pop("codebook.ema_decay", None)
    dead_threshold = entries.pop("codebook.dead_threshold", None)

    vocab = parse_vocab(vocab_raw.decode())
    params = ParamStore()
    vectors = counts = None
    for name, arr in _parse_tensor_blob(tensor_raw):
        if name == "__codebook.vectors":
            vectors = arr
        elif name == "__codebook.ema_counts":
            counts = arr
        else:
            params.add(name, Tensor(arr, requires_grad=True))

    codebook = None
    if vectors is not None:
        codebook = CodeBook(vectors=Tensor(vectors, requires_grad=True),
                            ema_decay=ema_decay, ema_counts=counts,
                            dead_threshold=dead_threshold)
    return Checkpoint(kind=kind, config=entries, vocab=vocab, params=params,
                      codebook=codebook, rng_state=rng_state)


def require_dimensions(ckpt, code_count=None, code_dim=None):
    """Reject artifact mixups early with a dimension diagnostic."""
    if ckpt.codebook is None:
        return
    K, D = ckpt.codebook.vectors.data.shape
    if code_count is not None and K != code_count:
        raise DataFormatError(f"codebook has K={K}, expected K={code_count}")
    if code_dim is not None and D != code_dim:
        raise DataFormatError(f"codebook has D={D}, expected D={code_dim}")
