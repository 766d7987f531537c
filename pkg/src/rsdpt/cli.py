"""rsdpt command line: vocab building, post-training data preparation,
post-training, fine-tuning, evaluation and prediction.

Exit codes: 0 success, 1 usage or configuration error, 2 data/validation
error, 3 runtime failure. ``RSDPT_LOG`` (error|info|debug) sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import corpus, evaluation
from .autograd import no_grad
from .encoder import Encoder, EncoderConfig, is_checkpoint, load_checkpoint
from .errors import ConfigError, DataError
from .pretrain_gen import generate_pretrain_set, read_pretrain_set, tokenize_dialogs, write_pretrain_set
from .tokenizer import Tokenizer, Vocab, build_vocab
from .trainer import OBJECTIVES, TrainConfig, fine_tune, post_train

logger = logging.getLogger("rsdpt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

_TRAIN_DEFAULTS = TrainConfig()
_MODEL_DEFAULTS = EncoderConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _train_flag(p, flag: str, field_name: str, type_=None, help_: str = "", **kw):
    default = getattr(_TRAIN_DEFAULTS, field_name)
    p.add_argument(flag, dest=field_name, type=type_, default=None, help=f"{help_} (default: {default})", **kw)


def _model_flag(p, flag: str, field_name: str, type_, help_: str):
    default = getattr(_MODEL_DEFAULTS, field_name)
    p.add_argument(flag, dest="model_" + field_name, type=type_, default=None, help=f"{help_} (default: {default})")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help=f"seed for all randomness (default: {_TRAIN_DEFAULTS.seed})")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default: 1)")
    p.add_argument("--config", default=None, help="JSON file with TrainConfig fields; flags override it (default: None)")


def _seq_flags(p):
    _train_flag(p, "--max-context-len", "max_context_len", int, "context block length")
    _train_flag(p, "--max-response-len", "max_response_len", int, "response block length")
    p.add_argument("--no-eot", dest="eot", action="store_const", const=False, default=None,
                   help="do not append [EOT] after each utterance (default: [EOT] on)")


def _optim_flags(p):
    _train_flag(p, "--batch-size", "batch_size", int, "examples per step")
    _train_flag(p, "--lr", "learning_rate", float, "peak learning rate")
    _train_flag(p, "--weight-decay", "weight_decay", float, "decoupled weight decay")
    _train_flag(p, "--warmup-fraction", "warmup_fraction", float, "fraction of steps with linear warmup")
    _train_flag(p, "--max-steps", "max_steps", int, "optimizer steps")
    _train_flag(p, "--clip-norm", "clip_norm", float, "global gradient-norm clip")
    _train_flag(p, "--log-interval", "log_interval", int, "steps between log records")


def _model_flags(p):
    _model_flag(p, "--layers", "num_layers", int, "encoder layers (new models only)")
    _model_flag(p, "--hidden", "hidden_size", int, "hidden size (new models only)")
    _model_flag(p, "--heads", "num_heads", int, "attention heads (new models only)")
    _model_flag(p, "--ff", "ff_size", int, "feed-forward size (new models only)")
    _model_flag(p, "--dropout", "dropout_rate", float, "dropout rate (new models only)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rsdpt", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from dialogs")
    p.add_argument("--input", required=True, help="dialogs JSONL, or - for stdin")
    p.add_argument("--size", type=int, required=True, help="target vocabulary size")
    p.add_argument("--out", required=True, help="vocab file to write")
    _common(p)

    p = sub.add_parser("prepare-pretrain", help="write MLM+NSP examples as JSONL")
    p.add_argument("--dialogs", required=True, help="dialogs JSONL, or - for stdin")
    p.add_argument("--vocab", required=True, help="vocab file")
    p.add_argument("--count", type=int, required=True, help="number of examples")
    p.add_argument("--seq-len", type=int, default=None,
                   help=f"sequence length q (default: {_TRAIN_DEFAULTS.max_len})")
    _train_flag(p, "--mask-rate", "mask_rate", float, "MLM selection rate")
    p.add_argument("--no-eot", dest="eot", action="store_const", const=False, default=None,
                   help="do not append [EOT] after each utterance (default: [EOT] on)")
    p.add_argument("--shard", type=int, default=0, help="shard index mixed into the seed (default: 0)")
    p.add_argument("--out", required=True, help="output JSONL")
    _common(p)

    p = sub.add_parser("post-train", help="domain post-training with MLM and/or NSP")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dialogs", help="dialogs JSONL; examples are sampled on the fly (default: None; this or --pretrain-data)")
    src.add_argument("--pretrain-data", help="prepared examples JSONL, read cyclically (default: None)")
    p.add_argument("--vocab", default=None, help="vocab file (default: the --init checkpoint's)")
    p.add_argument("--init", default=None, help="checkpoint to start from (default: random init)")
    p.add_argument("--resume", default=None, help="checkpoint with optimizer state to continue (default: None)")
    _train_flag(p, "--objective", "objective", str, "post-training loss terms", choices=OBJECTIVES)
    _train_flag(p, "--mask-rate", "mask_rate", float, "MLM selection rate")
    _train_flag(p, "--checkpoint-interval", "checkpoint_interval", int, "steps between checkpoints, 0 for end only")
    _seq_flags(p)
    _optim_flags(p)
    _model_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--log", default=None, help="training log JSONL (default: <out>/train_log.jsonl)")
    _common(p)

    p = sub.add_parser("fine-tune", help="pointwise response-selection fine-tuning")
    tr = p.add_mutually_exclusive_group(required=True)
    tr.add_argument("--train", help="labeled JSONL {context, response, label} (default: None; this or --train-tsv)")
    tr.add_argument("--train-tsv", help="Ubuntu-style context<TAB>response<TAB>label file (default: None)")
    p.add_argument("--valid", default=None, help="evaluation JSONL used to pick the best epoch (default: None)")
    p.add_argument("--init", default=None, help="checkpoint to start from, e.g. a post-trained one (default: random init)")
    p.add_argument("--vocab", default=None, help="vocab file (default: the --init checkpoint's)")
    _train_flag(p, "--vft-layers", "vft_layers", int, "number of top layers to tune; None tunes all")
    _train_flag(p, "--negatives", "negatives_per_positive", int, "negatives per positive, resampled each epoch when > 1")
    _train_flag(p, "--epochs", "epochs", int, "training epochs")
    p.add_argument("--freeze-embeddings", dest="freeze_embeddings", action="store_const", const=True, default=None,
                   help="also freeze embedding tables under --vft-layers (default: False)")
    _seq_flags(p)
    _optim_flags(p)
    _model_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--log", default=None, help="training log JSONL (default: <out>/train_log.jsonl)")
    _common(p)

    p = sub.add_parser("evaluate", help="R_n@k and MRR of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="evaluation JSONL, or - for stdin")
    p.add_argument("--ks", default=None, help="comma-separated k values (default: 1,2,5 for n=10; 1,10,50 for n=100)")
    p.add_argument("--report", default=None, help="JSON report path (default: stdout only)")
    p.add_argument("--dump-scores", default=None, help="per-instance scores JSONL (default: None)")
    _seq_flags(p)
    _common(p)

    p = sub.add_parser("predict", help="score candidates without computing metrics")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="JSONL with context and candidates, or - for stdin")
    p.add_argument("--out", default="-", help="scores JSONL (default: stdout)")
    _seq_flags(p)
    _common(p)
    return parser


# helpers --------------------------------------------------------------------------


def _setup_logging():
    level = os.environ.get("RSDPT_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"RSDPT_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _require(*paths):
    for path in paths:
        if path is not None and path != "-" and not Path(path).exists():
            raise DataError(f"input not found: {path}")


def _train_config(args, base: dict | None = None) -> TrainConfig:
    values = asdict(_TRAIN_DEFAULTS)
    if base:
        values.update(base)
    if args.config:
        _require(args.config)
        with open(args.config) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{args.config}: invalid JSON ({exc.msg})") from None
        unknown = set(loaded) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig(**values)


def _model_config(args, vocab_size: int, max_positions: int) -> EncoderConfig:
    values = asdict(_MODEL_DEFAULTS)
    for name in values:
        v = getattr(args, "model_" + name, None)
        if v is not None:
            values[name] = v
    values.update(vocab_size=vocab_size, max_positions=max_positions)
    return EncoderConfig(**values)


def _checkpoint_train_config(path) -> dict:
    f = Path(path) / "train_config.json"
    if not f.exists():
        return {}
    with open(f) as fh:
        saved = json.load(fh)
    return {k: saved[k] for k in ("max_context_len", "max_response_len", "eot") if k in saved}


def _vocab_for(args, checkpoint=None) -> Vocab:
    if args.vocab:
        return Vocab.load(args.vocab)
    if checkpoint and (Path(checkpoint) / "vocab.txt").exists():
        return Vocab.load(Path(checkpoint) / "vocab.txt")
    raise ConfigError("no vocabulary: pass --vocab or a checkpoint containing vocab.txt")


def _load_model(path) -> Encoder:
    if not is_checkpoint(path):
        raise DataError(f"not a checkpoint directory: {path}")
    return load_checkpoint(path)


# commands -------------------------------------------------------------------------


def cmd_build_vocab(args):
    _require(args.input)
    dialogs = corpus.load_dialogs(args.input)
    vocab = build_vocab(dialogs, args.size)
    vocab.save(args.out)
    logger.info("wrote %d tokens to %s", len(vocab), args.out)


def cmd_prepare_pretrain(args):
    _require(args.dialogs, args.vocab)
    cfg = _train_config(args)
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    q = args.seq_len or cfg.max_len
    vocab = Vocab.load(args.vocab)
    dialogs = tokenize_dialogs(corpus.load_dialogs(args.dialogs), vocab)
    stream = generate_pretrain_set(dialogs, args.count, q, vocab, cfg.seed, rate=cfg.mask_rate, eot=cfg.eot, shard=args.shard)
    n = write_pretrain_set(stream, args.out)
    logger.info("wrote %d examples to %s", n, args.out)


def cmd_post_train(args):
    _require(args.dialogs, args.pretrain_data, args.vocab, args.init, args.resume)
    start = args.resume or args.init
    cfg = _train_config(args, _checkpoint_train_config(start) if start else None)
    if cfg.max_steps is None:
        raise ConfigError("post-train needs --max-steps (or max_steps in --config)")
    vocab = _vocab_for(args, start)
    model = _load_model(args.init) if args.init else None
    model_config = None if model else _model_config(args, len(vocab), cfg.max_len)
    dialogs = corpus.load_dialogs(args.dialogs) if args.dialogs else None
    examples = read_pretrain_set(args.pretrain_data) if args.pretrain_data else None
    Path(args.out).mkdir(parents=True, exist_ok=True)
    log = args.log or Path(args.out) / "train_log.jsonl"
    if Path(log).exists() and not args.resume:
        Path(log).unlink()
    result = post_train(
        dialogs, vocab, cfg, model=model, model_config=model_config, out_dir=args.out, log_path=log,
        examples=examples, resume_from=args.resume,
    )
    logger.info("post-training done: %d log records, checkpoint at %s", len(result.log), args.out)


def cmd_fine_tune(args):
    _require(args.train, args.train_tsv, args.valid, args.init, args.vocab)
    cfg = _train_config(args, _checkpoint_train_config(args.init) if args.init else None)
    vocab = _vocab_for(args, args.init)
    model = _load_model(args.init) if args.init else None
    model_config = None if model else _model_config(args, len(vocab), cfg.max_len)
    if model is not None:
        cfg.check_model(model.config)
    else:
        cfg.check_model(model_config)
    train = corpus.load_finetune(args.train) if args.train else corpus.import_ubuntu_tsv(args.train_tsv)
    valid = corpus.load_eval(args.valid) if args.valid else None
    tok = Tokenizer(vocab, cfg.max_context_len, cfg.max_response_len, eot=cfg.eot)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    log = args.log or Path(args.out) / "train_log.jsonl"
    if Path(log).exists():
        Path(log).unlink()
    result = fine_tune(train, valid, tok, cfg, model=model, model_config=model_config, out_dir=args.out, log_path=log)
    logger.info("fine-tuning done: best epoch %d, validation MRR %.4f", result.best_epoch, result.best_mrr)


def _scoring_setup(args):
    _require(args.checkpoint, args.data)
    model = _load_model(args.checkpoint)
    cfg = _train_config(args, _checkpoint_train_config(args.checkpoint))
    cfg.check_model(model.config)
    vocab = _vocab_for(argparse.Namespace(vocab=None), args.checkpoint)
    return model, Tokenizer(vocab, cfg.max_context_len, cfg.max_response_len, eot=cfg.eot)


def cmd_evaluate(args):
    model, tok = _scoring_setup(args)
    instances = corpus.load_eval(args.data)
    ks = None
    if args.ks:
        try:
            ks = [int(k) for k in args.ks.split(",")]
        except ValueError:
            raise UsageError(f"--ks must be comma-separated integers, got {args.ks!r}") from None
    metrics = evaluation.evaluate(model, instances, tok, ks=ks, report_path=args.report, scores_path=args.dump_scores)
    print(json.dumps(metrics.to_report()))


def cmd_predict(args):
    model, tok = _scoring_setup(args)
    out = sys.stdout if args.out == "-" else open(args.out, "w")
    n = 0
    try:
        for lineno, obj in corpus._jsonl_records(args.data):
            try:
                context, candidates = list(obj["context"]), list(obj["candidates"])
            except KeyError as exc:
                raise DataError(f"{args.data}:{lineno}: missing field {exc.args[0]!r}") from None
            if not context or not candidates:
                raise DataError(f"{args.data}:{lineno}: empty context or candidates")
            with no_grad():
                scores = model.score([tok.model_input(context, c) for c in candidates]).astype(float)
            order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
            out.write(json.dumps({"instance": n, "scores": scores.tolist(), "ranking": order}) + "\n")
            n += 1
    finally:
        if out is not sys.stdout:
            out.close()


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "prepare-pretrain": cmd_prepare_pretrain,
    "post-train": cmd_post_train,
    "fine-tune": cmd_fine_tune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        with threadpool_limits(limits=max(1, args.threads)):
            COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"rsdpt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"rsdpt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"rsdpt {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
