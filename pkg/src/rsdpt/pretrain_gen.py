"""Joint MLM + NSP post-training examples built from raw dialogs.

Every utterance is closed by [EOT] (unless disabled for the ablation), segment
pairs are multi-utterance spans split at a turn boundary, and masking never
touches special tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError
from .tokenizer import CLS_ID, EOT, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, Vocab, encode_ids, tokenize

IS_NEXT = 1
NOT_NEXT = 0


@dataclass
class TokenizedDialog:
    id: str
    turns: list[list[str]]


def tokenize_dialogs(dialogs: Iterable, vocab: Vocab) -> list[TokenizedDialog]:
    out = []
    for d in dialogs:
        turns = [tokenize(u, vocab) for u in d.utterances]
        out.append(TokenizedDialog(d.id, [t for t in turns if t]))
    return out


def append_eot(utterance_tokens: Sequence[str]) -> list[str]:
    if not utterance_tokens:
        raise DataError("cannot append [EOT] to an empty utterance")
    return list(utterance_tokens) + [EOT]


def _turns(tokens: Sequence[Sequence[str]], eot: bool) -> list[list[str]]:
    return [append_eot(t) if eot else list(t) for t in tokens]


def shrink_front(turns: list[list[str]], budget: int) -> list[str]:
    """Drop the oldest turns until the rest fits; cut tokens if one turn alone
    is too long."""
    while len(turns) > 1 and sum(map(len, turns)) > budget:
        turns = turns[1:]
    flat = [t for turn in turns for t in turn]
    return flat[-budget:] if len(flat) > budget else flat


def shrink_back(turns: list[list[str]], budget: int) -> list[str]:
    """Drop the newest turns until the rest fits; cut tokens if one turn alone
    is too long."""
    while len(turns) > 1 and sum(map(len, turns)) > budget:
        turns = turns[:-1]
    flat = [t for turn in turns for t in turn]
    if len(flat) > budget:
        flat = flat[: budget - 1] + flat[-1:] if flat[-1] == EOT else flat[:budget]
    return flat


@dataclass
class NspPair:
    seg_a: list[str]
    seg_b: list[str]
    label: int
    # provenance: which dialogs and turn ranges the segments were cut from
    dialog_a: str = ""
    dialog_b: str = ""
    split_a: int = 0
    split_b: int = 0

    def __iter__(self):
        return iter((self.seg_a, self.seg_b, self.label))


def nsp_pool(dialogs: Sequence[TokenizedDialog]) -> list[int]:
    return [i for i, d in enumerate(dialogs) if len(d.turns) >= 2]


def sample_nsp_pair(
    dialogs: Sequence[TokenizedDialog],
    rng: np.random.Generator,
    q: int,
    eot: bool = True,
    force_label: int | None = None,
    pool: Sequence[int] | None = None,
) -> NspPair:
    """Draw one (A, B, label) pair.

    IsNext: turns 1..j and j+1..m of one dialog. NotNext: A as above, B the
    tail of a split of a different dialog. Each segment is shrunk to
    ``(q - 3) // 2`` tokens. ``pool`` may pass precomputed indices of the
    dialogs with at least two turns.
    """
    if pool is None:
        pool = nsp_pool(dialogs)
    if not pool:
        raise DataError("NSP sampling needs at least one dialog with two or more utterances")
    budget = (q - 3) // 2
    if force_label is None:
        label = IS_NEXT if rng.random() < 0.5 else NOT_NEXT
    else:
        label = force_label
    if label == NOT_NEXT and len(pool) < 2:
        raise DataError("NotNext sampling needs at least two dialogs with two or more utterances")

    ia = int(rng.integers(len(pool)))
    a = pool[ia]
    turns_a = _turns(dialogs[a].turns, eot)
    j = int(rng.integers(1, len(turns_a)))
    if label == IS_NEXT:
        b, turns_b, k = a, turns_a, j
    else:
        pick = int(rng.integers(len(pool) - 1))
        b = pool[pick + 1] if pick >= ia else pool[pick]
        turns_b = _turns(dialogs[b].turns, eot)
        k = int(rng.integers(1, len(turns_b)))
    seg_a = shrink_front(turns_a[:j], budget)
    seg_b = shrink_back(turns_b[k:], budget)
    return NspPair(seg_a, seg_b, label, dialogs[a].id, dialogs[b].id, j, k)


def apply_mlm(
    input_ids: Sequence[int],
    maskable_positions: Sequence[int],
    rng,
    rate: float = 0.15,
    vocab_size: int | None = None,
):
    """Corrupt a random subset of ``maskable_positions``.

    The number of positions is ``rate * n`` rounded stochastically (so its
    expectation is exactly ``rate * n`` and it never exceeds the ceiling),
    with at least one. Each chosen position becomes [MASK] (80%), a random
    non-special id (10%) or stays as is (10%).

    Returns ``(masked_ids, positions, targets)`` with positions sorted and
    targets holding the original ids.
    """
    ids = np.array(input_ids, dtype=np.int64)
    maskable = np.asarray(maskable_positions, dtype=np.int64)
    n = len(maskable)
    if n == 0:
        raise DataError("no maskable positions")
    expected = rate * n
    count = int(math.floor(expected))
    if rng.random() < expected - count:
        count += 1
    count = min(max(count, 1), n)
    chosen = np.sort(maskable[rng.permutation(n)[:count]])
    targets = ids[chosen].copy()
    hi = vocab_size if vocab_size is not None else int(ids.max()) + 1
    for pos in chosen:
        u = rng.random()
        if u < 0.8:
            ids[pos] = MASK_ID
        elif u < 0.9 and hi > NUM_SPECIAL:
            ids[pos] = int(rng.integers(NUM_SPECIAL, hi))
    return ids, chosen, targets


@dataclass
class PretrainExample:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_positions: np.ndarray
    mlm_targets: np.ndarray
    nsp_label: int
    pair: NspPair | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_ids": self.input_ids.tolist(),
                "segment_ids": self.segment_ids.tolist(),
                "attention_mask": self.attention_mask.tolist(),
                "mlm_positions": self.mlm_positions.tolist(),
                "mlm_targets": self.mlm_targets.tolist(),
                "nsp_label": int(self.nsp_label),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "PretrainExample":
        obj = json.loads(line)
        return cls(
            np.asarray(obj["input_ids"], dtype=np.int64),
            np.asarray(obj["segment_ids"], dtype=np.int64),
            np.asarray(obj["attention_mask"], dtype=np.int64),
            np.asarray(obj["mlm_positions"], dtype=np.int64),
            np.asarray(obj["mlm_targets"], dtype=np.int64),
            int(obj["nsp_label"]),
        )

    def unmasked_ids(self) -> np.ndarray:
        ids = self.input_ids.copy()
        ids[self.mlm_positions] = self.mlm_targets
        return ids


def build_pretrain_example(
    seg_a: Sequence[str],
    seg_b: Sequence[str],
    label: int,
    vocab: Vocab,
    q: int,
    rng,
    rate: float = 0.15,
) -> PretrainExample:
    n = len(seg_a) + len(seg_b) + 3
    if n > q:
        raise DataError(f"segments need {n} positions but q={q}")
    ids = np.full(q, PAD_ID, dtype=np.int64)
    ids[:n] = [CLS_ID] + encode_ids(seg_a, vocab) + [SEP_ID] + encode_ids(seg_b, vocab) + [SEP_ID]
    segments = np.zeros(q, dtype=np.int64)
    segments[len(seg_a) + 2 : n] = 1
    mask = np.zeros(q, dtype=np.int64)
    mask[:n] = 1
    maskable = np.flatnonzero(ids >= NUM_SPECIAL)
    masked, positions, targets = apply_mlm(ids, maskable, rng, rate=rate, vocab_size=len(vocab))
    return PretrainExample(masked, segments, mask, positions, targets, int(label))


def generate_pretrain_set(
    dialogs: Sequence[TokenizedDialog],
    count: int,
    q: int,
    vocab: Vocab,
    seed: int,
    rate: float = 0.15,
    eot: bool = True,
    shard: int = 0,
) -> Iterator[PretrainExample]:
    """Yield ``count`` examples, sampling dialogs with replacement.

    The stream depends only on ``(seed, shard)``.
    """
    rng = np.random.default_rng([seed, shard])
    pool = nsp_pool(dialogs)
    for _ in range(count):
        pair = sample_nsp_pair(dialogs, rng, q, eot=eot, pool=pool)
        ex = build_pretrain_example(pair.seg_a, pair.seg_b, pair.label, vocab, q, rng, rate=rate)
        ex.pair = pair
        yield ex


def write_pretrain_set(examples: Iterable[PretrainExample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
            n += 1
    return n


def read_pretrain_set(path) -> list[PretrainExample]:
    with open(path, "r", encoding="utf-8") as fh:
        return [PretrainExample.from_json(line) for line in fh if line.strip()]
