"""Two-stage training orchestration, evaluation, and generation.

Stage 1 trains the discrete model (reconstruction + commitment, EMA
codebook); stage 2 freezes it and fits the autoregressive prior on the
cached code grids.  The Gaussian baseline trains posterior and prior
jointly in a single stage.  Everything is seeded and single-threaded:
fixed seed means bit-identical metrics, parameters, and samples.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from .autodiff import Tensor, backward, sgd_step
from .checkpoint import Checkpoint, param_digest
from .errors import ContractViolation, DataFormatError, NumericError
from .model import ModelConfig, Seq2SeqModel, decode_free_running, dvam_loss, reconstruction_loss
from .prior import (
    GaussianPriorNet,
    PriorConfig,
    PriorNet,
    build_code_grids,
    grid_position_mask,
    prior_logits,
    sample_codes,
    sample_gaussian_latents,
)
from .quantizer import CodeBook, ema_update, init_codebook, revive_dead_codes
from .variational import gvam_loss


@dataclass
class TrainConfig:
    # model dimensions
    embed_dim: int = 64
    enc_hidden: int = 64
    dec_hidden: int = 64
    code_dim: int = 16
    code_count: int = 512
    attn_dim: int = 0
    # commitment-weight schedule
    beta_start: float = 0.1
    beta_max: float = 5.0
    warmup_epochs: int = 30
    ramp_epochs: int = 10
    # optimization
    lr: float = 1.0
    lr_decay_factor: float = 0.5
    patience_epochs: int = 2
    max_decays: int = 5
    batch_size: int = 32
    max_epochs: int = 50
    seed: int = 0
    # codebook
    ema_decay: float = 0.99
    dead_threshold: float = 1.0
    # prior
    prior_channels: int = 256
    prior_layers: int = 16
    prior_kernel: int = 3
    prior_epochs: int = 50
    prior_lr: float = 0.1
    # misc
    max_gen_len: int = 64
    sigma_floor: float = 1e-6
    max_vocab: int = 20000
    min_freq: int = 1

    def __post_init__(self):
        if self.beta_start > self.beta_max:
            raise ContractViolation("beta_start must be <= beta_max")
        if self.patience_epochs < 1:
            raise ContractViolation("patience_epochs must be >= 1")

    def model_config(self, vocab_size):
        return ModelConfig(vocab_size=vocab_size, embed_dim=self.embed_dim,
                           enc_hidden=self.enc_hidden, dec_hidden=self.dec_hidden,
                           code_dim=self.code_dim, code_count=self.code_count,
                           beta_max=self.beta_max, attn_dim=self.attn_dim)

    def prior_config(self):
        return PriorConfig(code_count=self.code_count, channels=self.prior_channels,
                           layers=self.prior_layers, kernel=self.prior_kernel)


def beta_schedule(config, epoch):
    """Piecewise linear and continuous: beta_start through the warmup,
    then a straight ramp over ramp_epochs, then beta_max."""
    if config.ramp_epochs <= 0:
        frac = 1.0 if epoch >= config.warmup_epochs else 0.0
    else:
        frac = (epoch - config.warmup_epochs) / config.ramp_epochs
    frac = min(1.0, max(0.0, frac))
    return config.beta_start + frac * (config.beta_max - config.beta_start)


@dataclass
class MetricsRecord:
    epoch: int
    rec: float          # per-sentence mean reconstruction NLL
    ppl: float          # exp(total_rec / total_tokens), definitional
    kl: float           # per-sentence mean, averaged along the sequence
    commit: float       # per-sentence mean commitment term
    codes_used: int     # distinct codebook indices on the split

    def as_line(self):
        return (f"{self.epoch},{self.rec:.6f},{self.ppl:.6f},"
                f"{self.kl:.6f},{self.commit:.6f},{self.codes_used}")


class _LrSchedule:
    """Halve the learning rate after ``patience`` epochs without
    validation improvement; stop training after ``max_decays`` halvings."""

    def __init__(self, config):
        self.lr = config.lr
        self.factor = config.lr_decay_factor
        self.patience = config.patience_epochs
        self.max_decays = config.max_decays
        self.best = np.inf
        self.stale = 0
        self.decays = 0

    def step(self, metric):
        """Returns True while training should continue."""
        if metric < self.best - 1e-12:
            self.best = metric
            self.stale = 0
            return True
        self.stale += 1
        if self.stale >= self.patience:
            if self.decays >= self.max_decays:
                return False
            self.lr *= self.factor
            self.decays += 1
            self.stale = 0
        return True


def _safe_exp(x):
    """exp that reports divergence as inf without a warning."""
    with np.errstate(over="ignore"):
        return float(np.exp(x))


def _check_finite(value, epoch, batch_idx, terms):
    if not np.isfinite(value):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in terms.items())
        raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_idx}: {detail}")


def _config_snapshot(config, vocab_size, avg_len, corpus_dir):
    snap = dataclasses.asdict(config)
    snap["vocab_size"] = vocab_size
    snap["avg_len"] = avg_len
    snap["corpus_dir"] = corpus_dir or ""
    return snap


def _prepare(config, splits):
    vocab = cp.build_vocab(splits["train"], config.max_vocab, config.min_freq)
    train = [cp.encode_line(vocab, ln) for ln in splits["train"]]
    val_lines = splits.get("val") or splits["train"]
    val = [cp.encode_line(vocab, ln) for ln in val_lines]
    return vocab, train, val


def train_dvam(config, splits, corpus_dir=None, log_kl=True):
    """Stage 1.  Returns (best-validation Checkpoint, per-epoch records).

    The KL column is evaluation-only bookkeeping (one-hot posterior:
    nothing differentiable); ``log_kl=False`` must therefore leave the
    parameter trajectory bit-identical.
    """
    rng = np.random.default_rng(config.seed)
    vocab, train, val = _prepare(config, splits)
    model = Seq2SeqModel(config.model_config(vocab.size), rng)

    # seed the codebook from real encoder states of the first batch
    first = cp.make_batches(train, config.batch_size)[0]
    from .model import encode
    rows = encode(model, first).data.reshape(-1, config.code_dim)
    valid = cp.target_mask(first).reshape(-1) > 0
    book = init_codebook(rows[valid], config.code_count, rng,
                         ema_decay=config.ema_decay, dead_threshold=config.dead_threshold)

    sched = _LrSchedule(config)
    records = []
    best = None
    for epoch in range(config.max_epochs):
        beta = beta_schedule(config, epoch)
        batches = cp.make_batches(train, config.batch_size,
                                  shuffle_seed=config.seed * 100003 + epoch)
        pool = None
        for bi, batch in enumerate(batches):
            res = dvam_loss(model, book, batch, beta)
            _check_finite(res.total.item(), epoch, bi,
                          {"rec": res.rec.item(), "commit": res.commit_term.item()})
            model.params.zero_grads()
            backward(res.total * (1.0 / batch.lengths.sum()))
            sgd_step(model.params, sched.lr)
            keep = res.row_mask > 0
            ema_update(book, res.hidden_rows[keep], res.indices.reshape(-1)[keep])
            pool = res.hidden_rows[keep]
        revive_dead_codes(book, pool, rng)

        metrics = _eval_dvam(model, book, val, config, epoch, prior=None, log_kl=log_kl)
        records.append(metrics)
        if best is None or metrics.rec < best[0]:
            best = (metrics.rec, model.params.copy_arrays(), book.vectors.data.copy(),
                    book.ema_counts.copy())
        if not sched.step(metrics.rec):
            break

    model.params.load_arrays(best[1])
    book.vectors.data = best[2]
    book.ema_counts = best[3]
    avg = cp.average_length(splits["train"])
    ckpt = Checkpoint(kind="dvam",
                      config=_config_snapshot(config, vocab.size, avg, corpus_dir),
                      vocab=vocab, params=model.params, codebook=book,
                      rng_state=rng.bit_generator.state)
    return ckpt, records


def _per_sentence_prior_nll(net, grids):
    """Per-row (nll, effective positions) without building a graph."""
    logits = prior_logits(net, grids).data
    shifted = logits - logits.max(axis=2, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=2))
    B, T = grids.shape
    picked = shifted[np.arange(B)[:, None], np.arange(T)[None, :], grids] - logz
    mask = grid_position_mask(grids, net.config.pad_code)
    return -(picked * mask).sum(axis=1), mask.sum(axis=1)


def _eval_dvam(model, book, seqs, config, epoch, prior=None, log_kl=True):
    """Validation metrics; with no trained prior the Eq-for-KL prior is
    uniform over the K codes (KL per position = ln K, closed form via
    the same one-hot identity)."""
    total_rec = 0.0
    total_commit = 0.0
    total_tokens = 0
    n_sent = 0
    kl_sum = 0.0
    used = set()
    for batch in cp.make_batches(seqs, config.batch_size):
        res = dvam_loss(model, book, batch, beta=0.0)
        total_rec += res.rec.item()
        total_commit += res.commit_term.item()
        total_tokens += int(batch.lengths.sum())
        n_sent += batch.size
        keep = res.row_mask.reshape(batch.size, -1) > 0
        used.update(np.unique(res.indices[keep]).tolist())
        if log_kl:
            if prior is not None:
                grids = _indices_to_grids(res.indices, batch.lengths, book.K)
                nll, npos = _per_sentence_prior_nll(prior, grids)
                kl_sum += float((nll / npos).sum())
            else:
                kl_sum += batch.size * np.log(book.K)
    rec = total_rec / n_sent
    return MetricsRecord(epoch=epoch, rec=rec,
                         ppl=_safe_exp(total_rec / total_tokens),
                         kl=(kl_sum / n_sent) if log_kl else float("nan"),
                         commit=total_commit / n_sent, codes_used=len(used))


def _indices_to_grids(indices, lengths, K):
    """[B, T] assignments + lengths -> PAD-terminated grids [B, T+1]."""
    B, T = indices.shape
    grids = np.full((B, T + 1), K, dtype=np.int64)
    for r in range(B):
        n = int(lengths[r])
        grids[r, :n] = indices[r, :n]
    return grids


def rebuild(ckpt):
    """Reconstruct (model, codebook) from a stage-1 or gvam checkpoint."""
    c = ckpt.config
    config = TrainConfig(**{f.name: c[f.name] for f in dataclasses.fields(TrainConfig)})
    rng = np.random.default_rng(0)
    model = Seq2SeqModel(config.model_config(c["vocab_size"]), rng,
                         gaussian=(ckpt.kind == "gvam"))
    gprior = None
    if ckpt.kind == "gvam":
        gprior = GaussianPriorNet(config.prior_config(), config.code_dim, rng,
                                  store=model.params)
    model.params.load_arrays({name: t.data for name, t in ckpt.params.items()})
    return model, ckpt.codebook, gprior, config


def train_prior(config, ckpt, splits, grids_cache=None):
    """Stage 2: fit the code prior on grids from the frozen stage-1 model.

    Returns (PriorNet, records, final per-token validation NLL).  The
    stage-1 parameters are verifiably untouched (digest invariant).
    """
    from .prior import read_code_grids, write_code_grids
    import os

    model, book, _, _ = rebuild(ckpt)
    digest_before = param_digest(ckpt.params)
    vocab = ckpt.vocab
    train = [cp.encode_line(vocab, ln) for ln in splits["train"]]
    val_lines = splits.get("val") or splits["train"]
    val = [cp.encode_line(vocab, ln) for ln in val_lines]

    if grids_cache is not None and os.path.exists(grids_cache):
        train_grids, _ = read_code_grids(grids_cache)
    else:
        train_grids = build_code_grids(model, book, train, config.batch_size)
        if grids_cache is not None:
            write_code_grids(grids_cache, train_grids, book.K)
    val_grids = build_code_grids(model, book, val, config.batch_size)

    rng = np.random.default_rng(config.seed + 1)
    net = PriorNet(config.prior_config(), rng)
    sched = _LrSchedule(dataclasses.replace(config, lr=config.prior_lr))
    records = []
    n = train_grids.shape[0]
    from .prior import prior_nll
    for epoch in range(config.prior_epochs):
        order = np.random.default_rng(config.seed * 100019 + epoch).permutation(n)
        for bi in range(0, n, config.batch_size):
            grids = train_grids[order[bi : bi + config.batch_size]]
            nll, npos = prior_nll(net, grids)
            _check_finite(nll.item(), epoch, bi // config.batch_size,
                          {"prior_nll": nll.item()})
            net.params.zero_grads()
            backward(nll * (1.0 / npos))
            sgd_step(net.params, sched.lr)
        v_nll, v_pos = _per_sentence_prior_nll(net, val_grids)
        per_token = float(v_nll.sum() / v_pos.sum())
        records.append(MetricsRecord(epoch=epoch, rec=float("nan"), ppl=float("nan"),
                                     kl=float((v_nll / v_pos).mean()),
                                     commit=float("nan"), codes_used=book.K))
        if not sched.step(per_token):
            break

    if param_digest(ckpt.params) != digest_before:
        raise NumericError("stage-1 parameters changed during prior training")
    final = float(_per_sentence_prior_nll(net, val_grids)[0].sum()
                  / _per_sentence_prior_nll(net, val_grids)[1].sum())
    return net, records, final


def train_gvam(config, splits, corpus_dir=None):
    """Joint single-stage training of the Gaussian baseline.  Returns
    (Checkpoint holding model + prior parameters, per-epoch records)."""
    rng = np.random.default_rng(config.seed)
    vocab, train, val = _prepare(config, splits)
    model = Seq2SeqModel(config.model_config(vocab.size), rng, gaussian=True)
    gprior = GaussianPriorNet(config.prior_config(), config.code_dim, rng,
                              store=model.params)
    sched = _LrSchedule(config)
    records = []
    best = None
    for epoch in range(config.max_epochs):
        batches = cp.make_batches(train, config.batch_size,
                                  shuffle_seed=config.seed * 100003 + epoch)
        for bi, batch in enumerate(batches):
            res = gvam_loss(model, gprior, batch, rng, config.sigma_floor)
            _check_finite(res.total.item(), epoch, bi,
                          {"rec": res.rec.item(), "kl": res.kl.item()})
            model.params.zero_grads()
            backward(res.total * (1.0 / batch.lengths.sum()))
            sgd_step(model.params, sched.lr)
        metrics = _eval_gvam(model, gprior, val, config, epoch)
        records.append(metrics)
        if best is None or metrics.rec < best[0]:
            best = (metrics.rec, model.params.copy_arrays())
        if not sched.step(metrics.rec):
            break

    model.params.load_arrays(best[1])
    avg = cp.average_length(splits["train"])
    ckpt = Checkpoint(kind="gvam",
                      config=_config_snapshot(config, vocab.size, avg, corpus_dir),
                      vocab=vocab, params=model.params, codebook=None,
                      rng_state=rng.bit_generator.state)
    return ckpt, records


def _eval_gvam(model, gprior, seqs, config, epoch):
    total_rec = 0.0
    total_tokens = 0
    kl_sum = 0.0
    n_sent = 0
    eval_rng = np.random.default_rng(config.seed + 12345)
    for batch in cp.make_batches(seqs, config.batch_size):
        res = gvam_loss(model, gprior, batch, eval_rng, config.sigma_floor)
        total_rec += res.rec.item()
        total_tokens += int(batch.lengths.sum())
        n_sent += batch.size
        # per-sentence KL averaged along the sequence
        from .variational import gaussian_kl_elements, posterior_params
        from .prior import gaussian_prior_params
        mu, sigma = posterior_params(model, batch, config.sigma_floor)
        z = Tensor(res.latents)
        mu_hat, sigma_hat = gaussian_prior_params(gprior, z, config.sigma_floor)
        per_pos = ad.tsum(gaussian_kl_elements(mu, sigma, mu_hat, sigma_hat), axis=2).data
        mask = cp.target_mask(batch)
        kl_sum += float(((per_pos * mask).sum(axis=1) / batch.lengths).sum())
    rec = total_rec / n_sent
    return MetricsRecord(epoch=epoch, rec=rec,
                         ppl=_safe_exp(total_rec / total_tokens),
                         kl=kl_sum / n_sent, commit=0.0, codes_used=0)


def evaluate(ckpt, prior, lines, batch_size=None):
    """Metrics on an explicit list of raw lines, with the trained prior
    supplying the KL column.  PPL = exp(total_rec / total_tokens), exact."""
    model, book, gprior, config = rebuild(ckpt)
    bs = batch_size or config.batch_size
    seqs = [cp.encode_line(ckpt.vocab, ln) for ln in lines]
    if ckpt.kind == "gvam":
        return _eval_gvam(model, gprior, seqs, config, epoch=-1)
    return _eval_dvam(model, book, seqs, config, epoch=-1, prior=prior, log_kl=True)


def generate(ckpt, prior, n, temperature, seed):
    """Sample n sentences: latent sequence from the prior, then a
    free-running decode with the sampled token fed back each step."""
    model, book, gprior, config = rebuild(ckpt)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        if ckpt.kind == "gvam":
            t_len = max(1, int(round(ckpt.config["avg_len"])) + 1)
            rows = sample_gaussian_latents(gprior, t_len, rng, config.sigma_floor)
        else:
            codes = sample_codes(prior, config.max_gen_len, temperature, rng)
            rows = book.vectors.data[np.array(codes, dtype=np.int64)]
        ids = decode_free_running(model, rows, rng, temperature, config.max_gen_len)
        out.append(cp.decode_ids(ckpt.vocab, ids))
    return out


def load_train_config(path):
    """Line-oriented ``key = value`` config file; unknown keys rejected."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{ln}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in fields:
                raise DataFormatError(f"{path}:{ln}: unknown config key {key!r}")
            kind = fields[key]
            try:
                kwargs[key] = int(raw) if kind in ("int", int) else float(raw)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{ln}: bad value for {key!r}") from exc
    return TrainConfig(**kwargs)
