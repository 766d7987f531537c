"""Domain post-training (MLM + NSP) and pointwise fine-tuning loops.

Covers the AdamW optimizer with warmup/decay schedule, layer freezing for
variable fine-tuning, and per-epoch negative resampling.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .corpus import Dialog, EvalInstance, FineTuneExample
from .encoder import Batch, Encoder, EncoderConfig, layer_index, load_tensors, save_tensors
from .errors import ConfigError, DataError
from .evaluation import evaluate
from .pretrain_gen import (
    PretrainExample,
    TokenizedDialog,
    build_pretrain_example,
    nsp_pool,
    sample_nsp_pair,
    tokenize_dialogs,
)
from .tokenizer import Tokenizer, Vocab

logger = logging.getLogger(__name__)

OBJECTIVES = ("mlm", "nsp", "mlm+nsp")
# heads that only the post-training objectives read
PRETRAIN_HEADS = ("mlm.", "nsp.")
FINETUNE_HEADS = ("rs.",)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 3e-5
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    max_steps: int | None = None
    max_context_len: int = 280
    max_response_len: int = 40
    vft_layers: int | None = None
    negatives_per_positive: int = 1
    seed: int = 0
    epochs: int = 3
    objective: str = "mlm+nsp"
    eot: bool = True
    mask_rate: float = 0.15
    clip_norm: float | None = 1.0
    freeze_embeddings: bool = False
    log_interval: int = 10
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be at least 1")
        if self.vft_layers is not None and self.vft_layers < 0:
            raise ConfigError("vft_layers must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if self.max_context_len < 4 or self.max_response_len < 1:
            raise ConfigError("sequence budgets too small")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")

    @property
    def max_len(self) -> int:
        return self.max_context_len + self.max_response_len

    def check_model(self, model_config: EncoderConfig) -> None:
        if self.vft_layers is not None and self.vft_layers > model_config.num_layers:
            raise ConfigError(f"vft_layers {self.vft_layers} exceeds num_layers {model_config.num_layers}")
        if self.max_len > model_config.max_positions:
            raise ConfigError(f"sequence length {self.max_len} exceeds max_positions {model_config.max_positions}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# optimizer --------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def save(self, path) -> None:
        tensors = {f"m.{k}": a for k, a in self.m.items()}
        tensors.update({f"v.{k}": a for k, a in self.v.items()})
        save_tensors(tensors, path)
        with open(Path(path) / "state.json", "w") as fh:
            json.dump({"step": self.step}, fh)

    @classmethod
    def load(cls, path) -> "OptimizerState":
        tensors = load_tensors(path)
        with open(Path(path) / "state.json") as fh:
            step = json.load(fh)["step"]
        m = {k[2:]: a for k, a in tensors.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in tensors.items() if k.startswith("v.")}
        return cls(m, v, step)


def decays(name: str) -> bool:
    """Weight decay applies to weights and tables, not to biases or layer norms."""
    return not (name.endswith(".bias") or ".ln." in name)


def lr_schedule(step: int, config: TrainConfig, max_steps: int | None = None) -> float:
    """Linear warmup over the first ``warmup_fraction`` of training, then
    linear decay to zero at ``max_steps``."""
    total = max_steps if max_steps is not None else config.max_steps
    if total is None:
        raise ConfigError("lr_schedule needs max_steps")
    warmup = int(config.warmup_fraction * total)
    peak = config.learning_rate
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    return max(0.0, peak * (total - step) / (total - warmup))


def clip_grad_norm(model: Encoder, max_norm: float) -> float:
    grads = [t.grad for t in model.params.values() if t.requires_grad and t.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for t in model.params.values():
            if t.requires_grad and t.grad is not None:
                t.grad = t.grad * factor
    return norm


def adamw_step(model: Encoder, state: OptimizerState, config: TrainConfig, step_lr: float) -> None:
    """One AdamW update of every trainable tensor; frozen tensors are skipped.

    Decoupled decay ``theta -= lr * wd * theta`` is applied before the Adam
    delta, which uses bias-corrected moments.
    """
    trainable = [(n, t) for n, t in model.params.items() if t.requires_grad]
    for name, t in trainable:
        if t.grad is None:
            raise DataError(f"missing gradient for trainable tensor {name}")
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in trainable:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and decays(name):
            t.data = t.data - (step_lr * config.weight_decay) * t.data
        t.data = (t.data - step_lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)).astype(t.dtype)


# layer freezing ----------------------------------------------------------------


def select_trainable(params, T: int, L: int, freeze_embeddings: bool = False) -> set[str]:
    """Names trainable when only the top ``T`` of ``L`` layers are tuned.

    Embeddings, pooler and heads stay trainable (embeddings can be frozen too
    with ``freeze_embeddings``).
    """
    if not 0 <= T <= L:
        raise ConfigError(f"vft_layers must satisfy 0 <= T <= L, got T={T}, L={L}")
    out = set()
    for name in params:
        idx = layer_index(name)
        if idx is not None:
            if idx >= L - T:
                out.add(name)
        elif not (freeze_embeddings and name.startswith("embeddings.")):
            out.add(name)
    return out


def finetune_parameters(params) -> set[str]:
    return {n for n in params if not n.startswith(PRETRAIN_HEADS)}


def pretrain_parameters(params) -> set[str]:
    return {n for n in params if not n.startswith(FINETUNE_HEADS)}


# negatives ----------------------------------------------------------------------


def resample_negatives(
    positives: Sequence[FineTuneExample], candidate_pool: Sequence[str], k: int, epoch: int, seed: int
) -> list[FineTuneExample]:
    """Each positive followed by ``k`` distinct negatives drawn from the pool
    (never its own response), with the draw fixed by ``(seed, epoch)``."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    pool = list(dict.fromkeys(candidate_pool))
    index = {r: i for i, r in enumerate(pool)}
    rng = np.random.default_rng([seed, epoch])
    out = []
    for pos in positives:
        own = index.get(pos.response)
        avail = len(pool) - (own is not None)
        if avail < k:
            raise DataError(f"candidate pool too small: {avail} usable responses for k={k}")
        picks = rng.choice(avail, size=k, replace=False)
        out.append(FineTuneExample(list(pos.context), pos.response, 1))
        for p in picks:
            p = int(p)
            if own is not None and p >= own:
                p += 1
            out.append(FineTuneExample(list(pos.context), pool[p], 0))
    return out


# losses -------------------------------------------------------------------------


@dataclass
class DptLoss:
    total: ag.Tensor
    mlm: float | None
    nsp: float | None


def collate_pretrain(examples: Sequence[PretrainExample]):
    batch = Batch(
        np.stack([e.input_ids for e in examples]),
        np.stack([e.segment_ids for e in examples]),
        np.stack([e.attention_mask for e in examples]),
    )
    batch_idx = np.concatenate([np.full(len(e.mlm_positions), i) for i, e in enumerate(examples)]).astype(np.int64)
    positions = np.concatenate([e.mlm_positions for e in examples]).astype(np.int64)
    targets = np.concatenate([e.mlm_targets for e in examples]).astype(np.int64)
    nsp = np.array([e.nsp_label for e in examples], dtype=np.int64)
    return batch, batch_idx, positions, targets, nsp


def dpt_loss(examples: Sequence[PretrainExample], model: Encoder, objective: str = "mlm+nsp", rng=None) -> DptLoss:
    """``L_MLM + L_NSP``: mean token cross-entropy over every masked position
    in the batch plus mean two-class cross-entropy over examples.

    ``objective`` keeps one term only for the ablations.
    """
    if not examples:
        raise DataError("empty batch")
    batch, batch_idx, positions, targets, nsp = collate_pretrain(examples)
    out = model.forward(batch, train=rng is not None, rng=rng)
    terms = []
    mlm_val = nsp_val = None
    if "mlm" in objective:
        if len(positions) == 0:
            raise DataError("batch has no masked positions")
        mlm = ag.softmax_cross_entropy(model.mlm_logits(out.last_hidden, batch_idx, positions), targets)
        mlm_val = float(mlm.data)
        terms.append(mlm)
    if "nsp" in objective:
        nsp_loss = ag.softmax_cross_entropy(model.nsp_logits(out.t_cls), nsp)
        nsp_val = float(nsp_loss.data)
        terms.append(nsp_loss)
    total = terms[0] if len(terms) == 1 else ag.add(terms[0], terms[1])
    return DptLoss(total, mlm_val, nsp_val)


def finetune_loss(inputs, labels, model: Encoder, rng=None) -> ag.Tensor:
    """Mean binary cross-entropy of the matching score against ``labels``."""
    out = model.forward(inputs, train=rng is not None, rng=rng)
    return ag.binary_cross_entropy_with_logits(model.rs_logit(out.t_cls), np.asarray(labels))


# logging --------------------------------------------------------------------------


class TrainLog:
    """Collects training records and optionally mirrors them to a JSONL file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "a" if Path(path).exists() else "w") if path else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        logger.info("%s", record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def save_training_checkpoint(model: Encoder, path, vocab: Vocab | None, config: TrainConfig, state=None) -> None:
    path = Path(path)
    model.save(path)
    if vocab is not None:
        vocab.save(path / "vocab.txt")
    with open(path / "train_config.json", "w") as fh:
        fh.write(config.to_json())
    if state is not None:
        state.save(path / "optimizer")


def _train_step(model, loss: ag.Tensor, state: OptimizerState, config: TrainConfig, lr: float) -> float:
    model.zero_grad()
    ag.backward(loss)
    model.fill_missing_grads()
    norm = clip_grad_norm(model, config.clip_norm) if config.clip_norm else float("nan")
    adamw_step(model, state, config, lr)
    return norm


# post-training --------------------------------------------------------------------


@dataclass
class PostTrainResult:
    model: Encoder
    log: list[dict]
    state: OptimizerState


class PretrainBatches:
    """Deterministic per-step batches: drawn fresh from the dialogs with an rng
    keyed on ``(seed, step)``, or read cyclically from a prepared set."""

    def __init__(self, vocab: Vocab, config: TrainConfig, dialogs=None, examples=None):
        self.vocab = vocab
        self.config = config
        self.examples = examples
        self.dialogs = None
        if examples is None:
            if dialogs is None:
                raise ConfigError("post-training needs dialogs or a prepared example set")
            dialogs = list(dialogs)
            self.dialogs = dialogs if dialogs and isinstance(dialogs[0], TokenizedDialog) else tokenize_dialogs(dialogs, vocab)
            self.pool = nsp_pool(self.dialogs)
        elif not examples:
            raise DataError("empty pretrain example set")

    def __call__(self, step: int) -> list[PretrainExample]:
        bs = self.config.batch_size
        if self.examples is not None:
            n = len(self.examples)
            return [self.examples[(step * bs + i) % n] for i in range(bs)]
        rng = np.random.default_rng([self.config.seed, 1, step])
        q = self.config.max_len
        batch = []
        for _ in range(bs):
            pair = sample_nsp_pair(self.dialogs, rng, q, eot=self.config.eot, pool=self.pool)
            batch.append(build_pretrain_example(pair.seg_a, pair.seg_b, pair.label, self.vocab, q, rng, self.config.mask_rate))
        return batch


def post_train(
    dialogs: Iterable[Dialog] | None,
    vocab: Vocab,
    config: TrainConfig,
    model: Encoder | None = None,
    model_config: EncoderConfig | None = None,
    out_dir=None,
    log_path=None,
    examples: Sequence[PretrainExample] | None = None,
    resume_from=None,
    callback: Callable[[dict], None] | None = None,
) -> PostTrainResult:
    """Run ``max_steps`` AdamW steps on the post-training loss.

    Starts from ``model`` (a prior checkpoint) or a fresh init of
    ``model_config``; ``resume_from`` continues an interrupted run including
    optimizer state. Checkpoints go to ``out_dir`` every
    ``checkpoint_interval`` steps and at the end.
    """
    if config.max_steps is None:
        raise ConfigError("post_train needs max_steps")
    state = OptimizerState()
    if resume_from is not None:
        from .encoder import load_checkpoint

        model = load_checkpoint(resume_from)
        state = OptimizerState.load(Path(resume_from) / "optimizer")
    elif model is None:
        if model_config is None:
            model_config = EncoderConfig(vocab_size=len(vocab), max_positions=config.max_len)
        model = Encoder(model_config, seed=config.seed)
    if model.config.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model.config.vocab_size} != vocab size {len(vocab)}")
    config.check_model(model.config)
    model.set_trainable(pretrain_parameters(model.params))

    batches = PretrainBatches(vocab, config, dialogs=dialogs, examples=examples)
    log = TrainLog(log_path)
    try:
        for step in range(state.step, config.max_steps):
            batch = batches(step)
            drop_rng = np.random.default_rng([config.seed, 2, step])
            loss = dpt_loss(batch, model, config.objective, rng=drop_rng)
            lr = lr_schedule(step + 1, config)
            total = float(loss.total.data)
            norm = _train_step(model, loss.total, state, config, lr)
            if (step + 1) % config.log_interval == 0 or step + 1 == config.max_steps or step == 0:
                rec = {"step": step + 1, "lr": lr, "loss_dpt": total, "loss_mlm": loss.mlm, "loss_nsp": loss.nsp, "grad_norm": norm}
                log.write(rec)
                if callback:
                    callback(rec)
            if out_dir and config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
                save_training_checkpoint(model, Path(out_dir) / f"step-{step + 1}", vocab, config, state)
    finally:
        log.close()
    if out_dir:
        save_training_checkpoint(model, out_dir, vocab, config, state)
    return PostTrainResult(model, log.records, state)


# fine-tuning ----------------------------------------------------------------------


@dataclass
class FineTuneResult:
    model: Encoder
    best_mrr: float
    best_epoch: int
    log: list[dict]
    history: list[dict]


def _steps_per_epoch(n_examples: int, config: TrainConfig) -> int:
    return math.ceil(n_examples / config.batch_size)


def fine_tune(
    train_set: Sequence[FineTuneExample],
    valid: Sequence[EvalInstance] | None,
    tokenizer: Tokenizer,
    config: TrainConfig,
    model: Encoder | None = None,
    model_config: EncoderConfig | None = None,
    out_dir=None,
    log_path=None,
    callback: Callable[[dict], None] | None = None,
) -> FineTuneResult:
    """Pointwise binary fine-tuning with layer freezing and optional 1:k
    negative resampling; keeps the epoch with the best validation MRR.

    With ``negatives_per_positive > 1`` the positives of ``train_set`` are
    re-paired every epoch with negatives drawn from all responses in
    ``train_set``; otherwise ``train_set`` is used as given.
    """
    if not train_set:
        raise DataError("empty training set")
    if model is None:
        if model_config is None:
            model_config = EncoderConfig(vocab_size=len(tokenizer.vocab), max_positions=config.max_len)
        model = Encoder(model_config, seed=config.seed)
    if model.config.vocab_size != len(tokenizer.vocab):
        raise ConfigError(f"model vocab_size {model.config.vocab_size} != vocab size {len(tokenizer.vocab)}")
    config.check_model(model.config)
    L = model.config.num_layers
    T = L if config.vft_layers is None else config.vft_layers
    trainable = select_trainable(model.params, T, L, config.freeze_embeddings) & finetune_parameters(model.params)
    model.set_trainable(trainable)

    k = config.negatives_per_positive
    positives = [x for x in train_set if x.label == 1]
    pool = [x.response for x in train_set]
    if k > 1 and not positives:
        raise DataError("negative resampling needs positive examples")
    n_epoch = len(positives) * (k + 1) if k > 1 else len(train_set)
    spe = _steps_per_epoch(n_epoch, config)
    total_steps = config.max_steps or spe * config.epochs

    cache: dict = {}

    def encode(x: FineTuneExample):
        key = (tuple(x.context), x.response)
        mi = cache.get(key)
        if mi is None:
            mi = cache[key] = tokenizer.model_input(x.context, x.response)
        return mi

    state = OptimizerState()
    log = TrainLog(log_path)
    history = []
    best_mrr, best_epoch, best_state = -1.0, -1, None
    step = 0
    try:
        epoch = 0
        while step < total_steps:
            data = resample_negatives(positives, pool, k, epoch, config.seed) if k > 1 else list(train_set)
            order = np.random.default_rng([config.seed, 3, epoch]).permutation(len(data))
            for start in range(0, len(order), config.batch_size):
                if step >= total_steps:
                    break
                chunk = [data[i] for i in order[start : start + config.batch_size]]
                inputs = [encode(x) for x in chunk]
                labels = [x.label for x in chunk]
                drop_rng = np.random.default_rng([config.seed, 2, step])
                loss = finetune_loss(inputs, labels, model, rng=drop_rng)
                lr = lr_schedule(step + 1, config, total_steps)
                value = float(loss.data)
                _train_step(model, loss, state, config, lr)
                step += 1
                if step % config.log_interval == 0 or step == total_steps or step == 1:
                    rec = {"step": step, "epoch": epoch, "lr": lr, "loss": value}
                    log.write(rec)
                    if callback:
                        callback(rec)
            summary = {"epoch": epoch, "step": step}
            if valid:
                metrics = evaluate(model, valid, tokenizer)
                summary.update(metrics.to_report())
                if metrics.mrr > best_mrr:
                    best_mrr, best_epoch, best_state = metrics.mrr, epoch, model.state_dict()
            else:
                # without validation the final weights are kept
                best_epoch = epoch
            history.append(summary)
            log.write(summary)
            epoch += 1
    finally:
        log.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    if out_dir:
        save_training_checkpoint(model, out_dir, tokenizer.vocab, config)
    return FineTuneResult(model, best_mrr, best_epoch, log.records, history)


def vft_sweep(
    train_set: Sequence[FineTuneExample],
    valid: Sequence[EvalInstance],
    tokenizer: Tokenizer,
    config: TrainConfig,
    init: Encoder,
    layer_counts: Iterable[int] | None = None,
) -> tuple[int, FineTuneResult, dict[int, float]]:
    """Fine-tune a copy of ``init`` for every ``T`` and keep the best by MRR."""
    L = init.config.num_layers
    counts = list(range(0, L + 1, 2)) if layer_counts is None else list(layer_counts)
    if L not in counts:
        counts.append(L)
    scores = {}
    best = None
    for T in counts:
        cfg = TrainConfig(**{**asdict(config), "vft_layers": T})
        result = fine_tune(train_set, valid, tokenizer, cfg, model=init.copy())
        scores[T] = result.best_mrr
        if best is None or result.best_mrr > best[1].best_mrr:
            best = (T, result)
    return best[0], best[1], scores
