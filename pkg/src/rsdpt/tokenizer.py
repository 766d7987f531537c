"""Frequency-built WordPiece vocabulary, greedy longest-match tokenization and
model input assembly for (context, response) pairs."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PAD, UNK, CLS, SEP, MASK, EOT = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[EOT]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, EOT)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, EOT_ID = range(6)
NUM_SPECIAL = len(SPECIAL_TOKENS)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if tokens[:NUM_SPECIAL] != SPECIAL_TOKENS:
            raise DataError("vocab must start with the six special tokens in reserved order")
        id_of = {}
        for i, tok in enumerate(tokens):
            if tok in id_of:
                raise DataError(f"duplicate token {tok!r} in vocab")
            id_of[tok] = i
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "id_of", id_of)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.id_of

    @property
    def specials(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tuple(tokens))


def normalize(text: str) -> list[str]:
    """Lowercase and split on whitespace."""
    return text.lower().split()


def vocab_floor(num_chars: int) -> int:
    """Smallest admissible vocab size: specials plus every character in both
    word-initial and continuation form."""
    return NUM_SPECIAL + 2 * num_chars


def build_vocab(dialogs: Iterable, target_size: int) -> Vocab:
    """Build a vocab from the utterances of ``dialogs``.

    Layout: the six specials, every character seen (word-initial, then its
    ``##`` form), then whole words by descending frequency (ties broken
    alphabetically) until ``target_size`` is reached.
    """
    counts: Counter[str] = Counter()
    for dialog in dialogs:
        utterances = getattr(dialog, "utterances", dialog)
        if isinstance(utterances, str):
            utterances = [utterances]
        for utt in utterances:
            counts.update(normalize(utt))
    if not counts:
        raise DataError("empty corpus")
    chars = sorted({c for word in counts for c in word})
    floor = vocab_floor(len(chars))
    if target_size < floor:
        raise DataError(f"vocab budget too small: need at least {floor} entries, got {target_size}")

    tokens = list(SPECIAL_TOKENS) + chars + [CONTINUATION + c for c in chars]
    seen = set(tokens)
    for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= target_size:
            break
        if word not in seen:
            tokens.append(word)
            seen.add(word)
    return Vocab(tuple(tokens))


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.id_of:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[str]:
    out = []
    for word in normalize(text):
        out.extend(wordpiece(word, vocab))
    return out


def encode_ids(tokens: Sequence[str], vocab: Vocab) -> list[int]:
    try:
        return [vocab.id_of[t] for t in tokens]
    except KeyError as exc:
        raise DataError(f"token not in vocab: {exc.args[0]!r}") from None


def decode_ids(ids: Sequence[int], vocab: Vocab) -> list[str]:
    return [vocab.tokens[int(i)] for i in ids]


@dataclass
class ModelInput:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    cls_position: int = 0

    def __len__(self):
        return len(self.input_ids)


def truncate_context(utterances: Sequence[Sequence[str]], budget: int, eot: bool = True) -> list[str]:
    """Keep the most recent turns that fit in ``budget`` tokens.

    Whole utterances are dropped oldest first; if even the latest turn does not
    fit, its oldest tokens are cut. Each kept turn is followed by [EOT] when
    ``eot`` is set.
    """
    turns = [list(u) + ([EOT] if eot else []) for u in utterances if len(u)]
    kept: list[list[str]] = []
    used = 0
    for turn in reversed(turns):
        if used + len(turn) > budget:
            break
        kept.append(turn)
        used += len(turn)
    if not kept and turns and budget > 0:
        kept.append(turns[-1][-budget:])
    return [tok for turn in reversed(kept) for tok in turn]


def build_model_input(
    context_utterances: Sequence[Sequence[str]],
    response: Sequence[str],
    vocab: Vocab,
    max_context_len: int,
    max_response_len: int,
    eot: bool = True,
) -> ModelInput:
    """Assemble ``[CLS] u1 [EOT] ... um [EOT] [SEP] r1 ... rn [SEP]`` padded to
    ``max_context_len + max_response_len``.

    The response keeps at most ``max_response_len`` tokens (cut from the end).
    The context block, together with [CLS] and both [SEP]s, gets the rest.
    """
    q = max_context_len + max_response_len
    context_budget = max_context_len - 3
    if context_budget < 1 or max_response_len < 1:
        raise DataError("sequence budget too small")
    ctx = truncate_context(context_utterances, context_budget, eot=eot)
    resp = list(response)[:max_response_len]
    if not ctx and not resp:
        raise DataError("empty input")

    tokens = [CLS] + ctx + [SEP] + resp + [SEP]
    n_a = len(ctx) + 2
    ids = np.full(q, PAD_ID, dtype=np.int64)
    ids[: len(tokens)] = encode_ids(tokens, vocab)
    segments = np.zeros(q, dtype=np.int64)
    segments[n_a : len(tokens)] = 1
    mask = np.zeros(q, dtype=np.int64)
    mask[: len(tokens)] = 1
    return ModelInput(ids, segments, mask)


class Tokenizer:
    """Vocab plus the sequence-length settings used to build model inputs.

    Caches per-string tokenization, which matters when the same candidate
    responses are scored many times.
    """

    def __init__(self, vocab: Vocab, max_context_len: int = 280, max_response_len: int = 40, eot: bool = True):
        self.vocab = vocab
        self.max_context_len = max_context_len
        self.max_response_len = max_response_len
        self.eot = eot
        self._cache: dict[str, list[str]] = {}

    @property
    def max_len(self) -> int:
        return self.max_context_len + self.max_response_len

    def tokenize(self, text: str) -> list[str]:
        toks = self._cache.get(text)
        if toks is None:
            toks = tokenize(text, self.vocab)
            self._cache[text] = toks
        return toks

    def model_input(self, context: Sequence[str], response: str) -> ModelInput:
        return build_model_input(
            [self.tokenize(u) for u in context],
            self.tokenize(response),
            self.vocab,
            self.max_context_len,
            self.max_response_len,
            eot=self.eot,
        )

    @classmethod
    def from_file(cls, path: str | os.PathLike, **kwargs) -> "Tokenizer":
        return cls(Vocab.load(path), **kwargs)
