"""Command-line front end: ``xiplus <verb> [options]``.

Verbs: ``gen``, ``train``, ``centroids``, ``embed``, ``score``, ``inspect``.
Every verb accepts ``--config``, ``--seed``, ``--out`` and ``--quiet``.
Failures print a single ``error: ...`` line and exit with 1 (usage or
config), 2 (data) or 3 (numerical).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from ._rng import stream
from .errors import ConfigError, DataError, XiPlusError
from .momentprop import ProjectedGaussian
from .scoring import evaluate, rho_policy
from .synthbench.data import Split, generate
from .synthbench.diagnostics import uncertainty_diagnostics
from .synthbench.train import (TrainConfig, centroids_from_model, embed_split, finetune_svl,
                               pretrain)

log = logging.getLogger("xiplus")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _say(args, text):
    if not args.quiet:
        print(text)


def _out_dir(args) -> Path:
    return formats.ensure_dir(args.out or ".")


def _config_values(args) -> tuple:
    if args.config is None:
        return {}, "<defaults>"
    return formats.read_config(args.config), str(args.config)


def _seed_override(args) -> dict:
    return {} if args.seed is None else {"seed": args.seed}


# -- verbs ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    values, source = _config_values(args)
    config = formats.synth_config(values, source, **_seed_override(args))
    dataset = generate(config)
    out = _out_dir(args)
    formats.write_dataset(dataset, out)
    _say(args, f"train: {len(dataset.train)} utterances, {len(dataset.train.speaker_set)} speakers; "
               f"eval: {len(dataset.eval)} utterances, {len(dataset.eval.speaker_set)} speakers; "
               f"trials: {len(dataset.trials)}; frames: {config.frames_per_utterance}x{dataset.frame_dim}")
    return 0


def _check_speakers(dataset, speakers, where):
    if speakers and speakers != dataset.train.speaker_set:
        raise DataError(f"{where} was trained on a different speaker set than this dataset")


def _check_frame_dim(model, dataset, where):
    if model.arch.frame_dim != dataset.frame_dim:
        raise DataError(f"{where} expects frame dimension {model.arch.frame_dim}, "
                        f"dataset has {dataset.frame_dim}")


def cmd_train(args) -> int:
    dataset = formats.read_dataset(args.data)
    init = None
    if args.init is not None:
        init, speakers = formats.read_checkpoint(args.init)
        _check_speakers(dataset, speakers, args.init)
        _check_frame_dim(init.model, dataset, args.init)
    if args.config is not None:
        values, source = _config_values(args)
        config = formats.train_config(values, source, **_seed_override(args))
    elif init is not None:
        config = TrainConfig(**{**vars(init.config), **_seed_override(args)})
    else:
        config = TrainConfig(**_seed_override(args))
    if args.stage == "svl":
        if args.centroids is None:
            raise UsageError("centroids required for the svl stage (--centroids)")
        if init is None:
            raise UsageError("an initial checkpoint is required for the svl stage (--init)")
        centroids = formats.read_centroids(args.centroids)
        result = finetune_svl(dataset, init, centroids, config)
    else:
        result = pretrain(dataset, config, init)
    out = _out_dir(args)
    formats.write_checkpoint(out / "checkpoint.jsonl", result, dataset.train.speaker_set)
    formats.write_text(out / "metrics.csv", formats.format_metrics(result.history))
    last = result.history[-1] if result.history else None
    if last:
        _say(args, f"stage={result.stage} epochs={result.epoch} ce_loss={last['ce_loss']:.6g} "
                   f"svl_loss={last['svl_loss']:.6g} alpha={result.alpha:.6g}")
    else:
        _say(args, f"stage={result.stage} epochs=0 (checkpoint equals initialization)")
    return 0


def cmd_centroids(args) -> int:
    ckpt, speakers = formats.read_checkpoint(_require(args.checkpoint, "--checkpoint"))
    dataset = formats.read_dataset(args.data)
    _check_frame_dim(ckpt.model, dataset, args.checkpoint)
    table = centroids_from_model(ckpt.model, dataset.train, source=str(args.checkpoint))
    formats.write_centroids(_out_dir(args) / "centroids.jsonl", table)
    _say(args, f"centroids: {len(table)} speakers from {sum(table.counts.values())} utterances")
    return 0


def _select(dataset, args):
    if args.utterances is None:
        return dataset.eval if args.split == "eval" else dataset.train
    wanted = formats.read_utterance_list(args.utterances)
    index = {}
    for split in (dataset.train, dataset.eval):
        for i, uid in enumerate(split.ids):
            index[uid] = (split, i)
    missing = [u for u in wanted if u not in index]
    if missing:
        raise DataError(f"unknown utterance id {missing[0]!r}")
    rows = [index[u] for u in wanted]
    frames = np.stack([s.frames[i] for s, i in rows]) if rows else np.zeros((0, 0, 0))
    return Split(list(wanted), [s.speakers[i] for s, i in rows], frames, None)


def cmd_embed(args) -> int:
    ckpt, _ = formats.read_checkpoint(_require(args.checkpoint, "--checkpoint"))
    dataset = formats.read_dataset(args.data)
    _check_frame_dim(ckpt.model, dataset, args.checkpoint)
    split = _select(dataset, args)
    if len(split) == 0:
        raise DataError("no utterances to embed")
    diagonal = args.cov != "full"
    means, covs = embed_split(ckpt.model, split, diagonal=diagonal)
    store = {uid: ProjectedGaussian(m, c, diagonal) for uid, m, c in zip(split.ids, means, covs)}
    path = _out_dir(args) / "embeddings.jsonl"
    formats.write_embeddings(path, store, args.cov)
    _say(args, f"embeddings: {len(store)} records, dim={means.shape[1]}, cov={args.cov}")
    return 0


def cmd_score(args) -> int:
    store = formats.read_embeddings(_require(args.embeddings, "--embeddings"))
    trials = formats.read_trials(_require(args.trials, "--trials"))
    if not store:
        raise DataError("embedding store is empty")
    dim = next(iter(store.values())).dim
    alpha = args.alpha
    if args.rho == "alpha" and alpha is None and args.checkpoint is not None:
        alpha = formats.read_checkpoint(args.checkpoint)[0].alpha
    rho = rho_policy(args.rho, dim, alpha)
    for trial in trials:
        for key in (trial.enroll_id, trial.test_id):
            if key not in store:
                raise DataError(f"unknown trial id {key!r}")
    if rho > 0:
        for key, emb in store.items():
            if not emb.has_covariance:
                raise DataError(f"embedding {key!r} has cov_kind 'none'; only rho mode 'zero' is allowed")
    report = evaluate(trials, store, rho)
    report.meta["rho_mode"] = args.rho
    formats.write_text(_out_dir(args) / "scores.csv", report.to_csv())
    _say(args, report.summary())
    return 0


def cmd_inspect(args) -> int:
    ckpt, _ = formats.read_checkpoint(_require(args.checkpoint, "--checkpoint"))
    dataset = formats.read_dataset(args.data, require_truth=True)
    _check_frame_dim(ckpt.model, dataset, args.checkpoint)
    split = dataset.eval if args.split == "eval" else dataset.train
    seed = ckpt.config.seed if args.seed is None else args.seed
    report = uncertainty_diagnostics(ckpt.model, split, args.shuffle_truth, stream(seed, "shuffle-truth"))
    formats.write_text(_out_dir(args) / "diagnostics.csv", formats.format_diagnostics(report))
    _say(args, report.summary())
    return 0


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (default: current directory)")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress summary output")

    parser = _Parser(prog="xiplus", description="Uncertainty-aware speaker embeddings on a synthetic benchmark.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage", choices=("pretrain", "svl"), default="pretrain")
    p.add_argument("--init", type=Path, help="checkpoint to start from (required for svl)")
    p.add_argument("--centroids", type=Path, help="centroid file (required for svl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("centroids", parents=[common], help="speaker centroids from a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_centroids)

    p = sub.add_parser("embed", parents=[common], help="extract embeddings")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--utterances", type=Path, help="file of utterance ids (overrides --split)")
    p.add_argument("--cov", choices=formats.COV_KINDS, default="full")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", parents=[common], help="score a trial list")
    p.add_argument("--embeddings", type=Path)
    p.add_argument("--trials", type=Path)
    p.add_argument("--rho", choices=("zero", "inv_d", "alpha"), default="zero")
    p.add_argument("--alpha", type=float, help="alpha override for rho mode 'alpha'")
    p.add_argument("--checkpoint", type=Path, help="read alpha from this checkpoint")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("inspect", parents=[common], help="predicted vs true uncertainty")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--shuffle-truth", action="store_true", help="permutation control")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except XiPlusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
