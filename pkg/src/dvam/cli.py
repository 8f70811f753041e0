"""Command-line interface.

Subcommands: train, train-prior, eval, generate, inspect-codebook.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import corpus as cp
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ContractViolation, DataFormatError, NumericError
from .quantizer import codebook_report
from .training import (
    TrainConfig,
    evaluate,
    generate,
    load_train_config,
    train_dvam,
    train_gvam,
    train_prior,
)


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this artifact reserves
    2 for data errors, so usage problems are re-raised and mapped to 1."""

    def error(self, message):
        raise _UsageExit(message)


def build_parser():
    p = _Parser(prog="dvam", description="Discrete variational attention language model")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="stage-1 (dvam) or joint (gvam) training")
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--corpus", required=True, help="directory with train.txt [valid.txt test.txt]")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--model", choices=["dvam", "gvam"], default="dvam")

    tp = sub.add_parser("train-prior", help="stage-2 code-prior training")
    tp.add_argument("--checkpoint", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--corpus", default=None, help="override the corpus dir recorded in the checkpoint")

    ev = sub.add_parser("eval", help="metrics on one split (CSV line to stdout)")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--prior", default=None)
    ev.add_argument("--split", choices=["train", "val", "test"], required=True)
    ev.add_argument("--corpus", default=None)

    g = sub.add_parser("generate", help="sample sentences")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prior", default=None)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)

    ic = sub.add_parser("inspect-codebook", help="per-code EMA counts and geometry")
    ic.add_argument("--checkpoint", required=True)
    return p


def _load_config(args):
    config = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = __import__("dataclasses").replace(config, seed=args.seed)
    return config


def _prior_checkpoint(net, base_ckpt):
    return Checkpoint(kind="prior", config=dict(base_ckpt.config),
                      vocab=base_ckpt.vocab, params=net.params,
                      codebook=None, rng_state={})


def _load_prior(path, code_count):
    from .training import TrainConfig
    import dataclasses as dc

    ckpt = load_checkpoint(path)
    if ckpt.kind != "prior":
        raise DataFormatError(f"{path} is a {ckpt.kind!r} checkpoint, expected a prior")
    config = TrainConfig(**{f.name: ckpt.config[f.name] for f in dc.fields(TrainConfig)})
    if config.code_count != code_count:
        raise DataFormatError(
            f"prior has K={config.code_count}, checkpoint expects K={code_count}")
    from .prior import PriorNet
    net = PriorNet(config.prior_config(), np.random.default_rng(0))
    net.params.load_arrays({name: t.data for name, t in ckpt.params.items()})
    return net


def _splits_for(ckpt, override):
    corpus_dir = override or ckpt.config.get("corpus_dir")
    if not corpus_dir:
        raise DataFormatError("checkpoint records no corpus dir; pass --corpus")
    return cp.read_corpus_dir(corpus_dir)


def run(args):
    if args.command == "train":
        config = _load_config(args)
        splits = cp.read_corpus_dir(args.corpus)
        if args.model == "gvam":
            ckpt, records = train_gvam(config, splits, corpus_dir=args.corpus)
        else:
            ckpt, records = train_dvam(config, splits, corpus_dir=args.corpus)
        for r in records:
            print(r.as_line())
        save_checkpoint(ckpt, args.out)
        return 0

    if args.command == "train-prior":
        import dataclasses as dc
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.kind != "dvam":
            raise DataFormatError("train-prior needs a stage-1 dvam checkpoint")
        config = TrainConfig(**{f.name: ckpt.config[f.name] for f in dc.fields(TrainConfig)})
        splits = _splits_for(ckpt, args.corpus)
        net, records, final = train_prior(config, ckpt, splits)
        for r in records:
            print(r.as_line())
        print(f"final_per_token_prior_nll,{final:.6f}")
        save_checkpoint(_prior_checkpoint(net, ckpt), args.out)
        return 0

    if args.command == "eval":
        ckpt = load_checkpoint(args.checkpoint)
        splits = _splits_for(ckpt, args.corpus)
        if args.split not in splits:
            raise DataFormatError(f"split {args.split!r} not present in corpus dir")
        prior = None
        if args.prior is not None:
            prior = _load_prior(args.prior, ckpt.config["code_count"])
        m = evaluate(ckpt, prior, splits[args.split])
        print(m.as_line())
        return 0

    if args.command == "generate":
        ckpt = load_checkpoint(args.checkpoint)
        prior = None
        if ckpt.kind == "dvam":
            if args.prior is None:
                raise _UsageExit("generate from a dvam checkpoint needs --prior")
            prior = _load_prior(args.prior, ckpt.config["code_count"])
        for line in generate(ckpt, prior, args.n, args.temperature, args.seed):
            print(line)
        return 0

    if args.command == "inspect-codebook":
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.codebook is None:
            raise DataFormatError("checkpoint holds no codebook")
        print("code,ema_count,l2_norm,nearest_other")
        for cid, count, norm, nearest in codebook_report(ckpt.codebook):
            print(f"{cid},{count:.6f},{norm:.6f},{nearest:.6f}")
        return 0

    raise _UsageExit(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return run(args)
    except _UsageExit as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
