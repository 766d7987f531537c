"""BERT-style transformer encoder with MLM, NSP and response-selection heads.

Parameters live in a flat ``name -> Tensor`` mapping so that checkpoints,
layer freezing and the optimizer can all address tensors by name.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ff_size: int = 256
    vocab_size: int = 1000
    max_positions: int = 64
    num_segments: int = 2
    dropout_rate: float = 0.1
    layer_norm_epsilon: float = 1e-12

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.max_positions < 8:
            raise ConfigError("max_positions must be at least 8")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be non-negative")
        if self.num_segments != 2:
            raise ConfigError("num_segments must be 2")

    @classmethod
    def bert_base(cls, vocab_size: int = 30522, max_positions: int = 320) -> "EncoderConfig":
        return cls(12, 768, 12, 3072, vocab_size, max_positions)


@dataclass
class Batch:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray

    def __len__(self):
        return self.input_ids.shape[0]


def collate(items) -> Batch:
    """Stack objects exposing ``input_ids``/``segment_ids``/``attention_mask``
    (a single one is treated as a batch of one)."""
    if hasattr(items, "input_ids"):
        if np.ndim(items.input_ids) == 2:
            return Batch(np.asarray(items.input_ids), np.asarray(items.segment_ids), np.asarray(items.attention_mask))
        items = [items]
    return Batch(
        np.stack([np.asarray(x.input_ids) for x in items]),
        np.stack([np.asarray(x.segment_ids) for x in items]),
        np.stack([np.asarray(x.attention_mask) for x in items]),
    )


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    H, F, V = cfg.hidden_size, cfg.ff_size, cfg.vocab_size
    shapes = {
        "embeddings.token": (V, H),
        "embeddings.position": (cfg.max_positions, H),
        "embeddings.segment": (cfg.num_segments, H),
        "embeddings.ln.gamma": (H,),
        "embeddings.ln.beta": (H,),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (H, H)
            shapes[p + f"attn.{proj}.bias"] = (H,)
        shapes[p + "attn.ln.gamma"] = (H,)
        shapes[p + "attn.ln.beta"] = (H,)
        shapes[p + "ff.in.weight"] = (H, F)
        shapes[p + "ff.in.bias"] = (F,)
        shapes[p + "ff.out.weight"] = (F, H)
        shapes[p + "ff.out.bias"] = (H,)
        shapes[p + "ff.ln.gamma"] = (H,)
        shapes[p + "ff.ln.beta"] = (H,)
    shapes.update(
        {
            "pooler.weight": (H, H),
            "pooler.bias": (H,),
            "mlm.transform.weight": (H, H),
            "mlm.transform.bias": (H,),
            "mlm.ln.gamma": (H,),
            "mlm.ln.beta": (H,),
            "mlm.decoder.weight": (H, V),
            "mlm.decoder.bias": (V,),
            "nsp.weight": (H, 2),
            "nsp.bias": (2,),
            "rs.weight": (H, 1),
            "rs.bias": (1,),
        }
    )
    return shapes


def init_parameters(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated normal (std 0.02) weights and tables, zero biases and
    layer-norm shifts, unit layer-norm scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, 0.02)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def layer_index(name: str) -> int | None:
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return None


@dataclass
class EncoderOutput:
    hidden_states: list[Tensor]
    t_cls: Tensor
    attention_probs: list[np.ndarray]

    @property
    def last_hidden(self) -> Tensor:
        return self.hidden_states[-1]


def embed(params, cfg: EncoderConfig, batch: Batch, rng=None) -> Tensor:
    """Token + position + segment embeddings, layer norm, then dropout when
    ``rng`` is given (train mode)."""
    B, T = batch.input_ids.shape
    if T > cfg.max_positions:
        raise DataError(f"sequence length {T} exceeds max_positions {cfg.max_positions}")
    tok = ag.embedding(params["embeddings.token"], batch.input_ids)
    pos = ag.embedding(params["embeddings.position"], np.arange(T))
    seg = ag.embedding(params["embeddings.segment"], batch.segment_ids)
    h = ag.add(ag.add(tok, pos), seg)
    h = ag.layer_norm(h, params["embeddings.ln.gamma"], params["embeddings.ln.beta"], cfg.layer_norm_epsilon)
    return ag.dropout(h, cfg.dropout_rate, rng)


def attention_block(hidden: Tensor, attention_mask, params, prefix: str, cfg: EncoderConfig, rng=None):
    """Self-attention, output projection, residual add and layer norm.

    Returns the new hidden state and the per-head attention weights.
    """

    def proj(x, which):
        return ag.linear(x, params[f"{prefix}attn.{which}.weight"], params[f"{prefix}attn.{which}.bias"])

    ctx, probs = ag.attention(
        proj(hidden, "query"), proj(hidden, "key"), proj(hidden, "value"), attention_mask, cfg.num_heads
    )
    out = ag.dropout(proj(ctx, "output"), cfg.dropout_rate, rng)
    h = ag.layer_norm(
        ag.add(hidden, out), params[prefix + "attn.ln.gamma"], params[prefix + "attn.ln.beta"], cfg.layer_norm_epsilon
    )
    return h, probs


def feed_forward(hidden: Tensor, params, prefix: str, cfg: EncoderConfig, rng=None) -> Tensor:
    inner = ag.gelu(ag.linear(hidden, params[prefix + "ff.in.weight"], params[prefix + "ff.in.bias"]))
    out = ag.dropout(ag.linear(inner, params[prefix + "ff.out.weight"], params[prefix + "ff.out.bias"]), cfg.dropout_rate, rng)
    return ag.layer_norm(
        ag.add(hidden, out), params[prefix + "ff.ln.gamma"], params[prefix + "ff.ln.beta"], cfg.layer_norm_epsilon
    )


def pool(hidden: Tensor, params) -> Tensor:
    """tanh-pooled state of position 0 ([CLS])."""
    B = hidden.shape[0]
    first = ag.gather_rows(hidden, np.arange(B), np.zeros(B, dtype=np.int64))
    return ag.tanh(ag.linear(first, params["pooler.weight"], params["pooler.bias"]))


def forward(params, cfg: EncoderConfig, batch: Batch, rng=None) -> EncoderOutput:
    h = embed(params, cfg, batch, rng)
    states, probs = [h], []
    for i in range(cfg.num_layers):
        prefix = f"layers.{i}."
        h, p = attention_block(h, batch.attention_mask, params, prefix, cfg, rng)
        h = feed_forward(h, params, prefix, cfg, rng)
        states.append(h)
        probs.append(p)
    return EncoderOutput(states, pool(h, params), probs)


def mlm_logits(final_hidden: Tensor, batch_idx, positions, params, cfg: EncoderConfig) -> Tensor:
    """Vocabulary logits at the given (example, position) pairs."""
    rows = ag.gather_rows(final_hidden, batch_idx, positions)
    t = ag.gelu(ag.linear(rows, params["mlm.transform.weight"], params["mlm.transform.bias"]))
    t = ag.layer_norm(t, params["mlm.ln.gamma"], params["mlm.ln.beta"], cfg.layer_norm_epsilon)
    return ag.linear(t, params["mlm.decoder.weight"], params["mlm.decoder.bias"])


def nsp_logits(t_cls: Tensor, params) -> Tensor:
    return ag.linear(t_cls, params["nsp.weight"], params["nsp.bias"])


def rs_logit(t_cls: Tensor, params) -> Tensor:
    """Pre-sigmoid response-selection score ``W_task . t_cls + b``, shape (B, 1)."""
    return ag.linear(t_cls, params["rs.weight"], params["rs.bias"])


def rs_score(t_cls, params) -> np.ndarray:
    """Matching probability in the open interval (0, 1), one per row."""
    t = t_cls if isinstance(t_cls, Tensor) else Tensor(np.asarray(t_cls))
    z = rs_logit(t, params).data.reshape(-1)
    s = ag.sigmoid(z)
    fin = np.finfo(s.dtype)
    return np.clip(s, fin.tiny, 1.0 - fin.epsneg)


class Encoder:
    """Config plus named parameters, with convenience wrappers around the
    functional forward pass and checkpoint I/O."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor] | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed, dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, batch, train: bool = False, rng: np.random.Generator | None = None) -> EncoderOutput:
        if not isinstance(batch, Batch):
            batch = collate(batch)
        return forward(self.params, self.config, batch, rng if train else None)

    def mlm_logits(self, final_hidden, batch_idx, positions) -> Tensor:
        return mlm_logits(final_hidden, batch_idx, positions, self.params, self.config)

    def nsp_logits(self, t_cls) -> Tensor:
        return nsp_logits(t_cls, self.params)

    def rs_logit(self, t_cls) -> Tensor:
        return rs_logit(t_cls, self.params)

    def rs_score(self, t_cls) -> np.ndarray:
        return rs_score(t_cls, self.params)

    def score(self, batch) -> np.ndarray:
        """Eval-mode matching probabilities for a batch of model inputs."""
        return self.rs_score(self.forward(batch).t_cls)

    def names(self) -> list[str]:
        return list(self.params)

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        for name, t in self.params.items():
            t.requires_grad = name in names
            if not t.requires_grad:
                t.grad = None

    def trainable(self) -> list[str]:
        return [n for n, t in self.params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        """Give trainable tensors untouched by the last backward a zero gradient."""
        for t in self.params.values():
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise DataError(f"shape mismatch for {n}: {state[n].shape} vs {t.shape}")
            t.data = state[n].astype(t.dtype, copy=True)

    def copy(self) -> "Encoder":
        params = {n: Tensor(t.data.copy(), t.requires_grad, n) for n, t in self.params.items()}
        return Encoder(self.config, params)

    def astype(self, dtype) -> "Encoder":
        params = {n: Tensor(t.data.astype(dtype), t.requires_grad, n) for n, t in self.params.items()}
        return Encoder(self.config, params)

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Encoder":
        return load_checkpoint(path)


# checkpoints ------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    """One raw little-endian row-major binary per tensor plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in tensors.items():
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        fname = name + ".bin"
        np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tofile(path / fname)
        manifest[name] = {"shape": list(arr.shape), "dtype": dtype, "filename": fname}
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    out = {}
    for name, meta in manifest.items():
        if meta["dtype"] not in _DTYPES:
            raise DataError(f"{name}: unsupported dtype {meta['dtype']!r}")
        arr = np.fromfile(path / meta["filename"], dtype=_DTYPES[meta["dtype"]])
        shape = tuple(meta["shape"])
        if arr.size != int(np.prod(shape)):
            raise DataError(f"{name}: expected {int(np.prod(shape))} values, file holds {arr.size}")
        out[name] = arr.reshape(shape).astype(meta["dtype"])
    return out


def save_checkpoint(model: Encoder, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "config.json", "w") as fh:
        json.dump(asdict(model.config), fh, indent=1)
    save_tensors(model.state_dict(), path)


def load_checkpoint(path) -> Encoder:
    path = Path(path)
    if not (path / "config.json").exists():
        raise DataError(f"{path}: not a checkpoint directory (config.json missing)")
    with open(path / "config.json") as fh:
        config = EncoderConfig(**json.load(fh))
    tensors = load_tensors(path)
    expected = parameter_shapes(config)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        raise DataError(f"{path}: checkpoint tensors do not match config (missing {missing[:3]})")
    params = {}
    for name in expected:
        arr = tensors[name]
        if arr.shape != expected[name]:
            raise DataError(f"{name}: shape {arr.shape} does not match config {expected[name]}")
        if not np.isfinite(arr).all():
            raise DataError(f"{name}: non-finite values")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return Encoder(config, params)


def is_checkpoint(path: str | os.PathLike) -> bool:
    return (Path(path) / "config.json").exists() and (Path(path) / "manifest.json").exists()


def parameters_finite(params: dict[str, Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in params.values())


def shapes_consistent(params: dict[str, Tensor], cfg: EncoderConfig) -> bool:
    expected = parameter_shapes(cfg)
    return set(params) == set(expected) and all(params[n].shape == s for n, s in expected.items())
