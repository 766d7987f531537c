"""Synthetic domain dialogs with a planted vocabulary.

Each dialog is about one topic. Its turns mix generic chatter with terms
drawn from that topic's private word list, and the closing turn (the
response) names terms of the same topic, so whether a response fits a
context is decided by topic agreement that no generic corpus could teach.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dialog, EvalInstance, FineTuneExample

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "gr", "pl", "tr", "kr"]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "n", "x", "k", "s", "t", "m", "rd", "lp"]

FILLER = (
    "i you it is the a to do how can this that my on with for in what when why "
    "ok yes no thanks please try again still not working now then just get see "
    "need want know think use run check did does have has any some there here so "
    "but and or if maybe sure well hmm right also first next after before"
).split()


def _make_terms(rng: np.random.Generator, count: int) -> list[str]:
    seen = set(FILLER)
    terms = []
    while len(terms) < count:
        n_syl = int(rng.integers(2, 4))
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(n_syl)
        )
        if word not in seen:
            seen.add(word)
            terms.append(word)
    return terms


@dataclass
class DomainSpec:
    num_topics: int = 30
    terms_per_topic: int = 6
    min_turns: int = 3
    max_turns: int = 6
    filler_per_turn: tuple[int, int] = (1, 3)
    terms_per_turn: tuple[int, int] = (2, 3)
    noise_rate: float = 0.1


class DomainCorpus:
    """Generator for topic-structured dialogs.

    ``vocabulary_seed`` fixes the planted term lists; dialog sampling uses
    its own seed so that several corpora can share a domain.
    """

    def __init__(self, spec: DomainSpec | None = None, vocabulary_seed: int = 0):
        self.spec = spec or DomainSpec()
        rng = np.random.default_rng(vocabulary_seed)
        terms = _make_terms(rng, self.spec.num_topics * self.spec.terms_per_topic)
        k = self.spec.terms_per_topic
        self.topics = [terms[i * k : (i + 1) * k] for i in range(self.spec.num_topics)]

    def _utterance(self, rng, topic: int) -> str:
        s = self.spec
        words = list(rng.choice(FILLER, size=int(rng.integers(s.filler_per_turn[0], s.filler_per_turn[1] + 1))))
        for _ in range(int(rng.integers(s.terms_per_turn[0], s.terms_per_turn[1] + 1))):
            t = topic if rng.random() >= s.noise_rate else int(rng.integers(s.num_topics))
            words.insert(int(rng.integers(len(words) + 1)), self.topics[t][int(rng.integers(len(self.topics[t])))])
        return " ".join(words)

    def dialog(self, rng, dialog_id: str) -> tuple[Dialog, int]:
        topic = int(rng.integers(self.spec.num_topics))
        m = int(rng.integers(self.spec.min_turns, self.spec.max_turns + 1))
        return Dialog(dialog_id, [self._utterance(rng, topic) for _ in range(m)]), topic

    def dialogs(self, count: int, seed: int, prefix: str = "d") -> list[Dialog]:
        rng = np.random.default_rng(seed)
        return [self.dialog(rng, f"{prefix}{i}")[0] for i in range(count)]


def finetune_pairs(dialogs, negatives: int, seed: int) -> list[FineTuneExample]:
    """Last turn as positive response, plus random responses of other dialogs
    as negatives."""
    rng = np.random.default_rng(seed)
    responses = [d.utterances[-1] for d in dialogs]
    out = []
    for i, d in enumerate(dialogs):
        out.append(FineTuneExample(d.utterances[:-1], d.utterances[-1], 1))
        others = rng.choice(len(dialogs) - 1, size=negatives, replace=False)
        for j in others:
            j = int(j) + (int(j) >= i)
            out.append(FineTuneExample(d.utterances[:-1], responses[j], 0))
    return out


def eval_instances(dialogs, n: int, seed: int) -> list[EvalInstance]:
    """n-candidate instances whose distractors are closing turns of other
    dialogs, with the truth at a random position."""
    rng = np.random.default_rng(seed)
    responses = [d.utterances[-1] for d in dialogs]
    out = []
    for i, d in enumerate(dialogs):
        others = [int(j) + (int(j) >= i) for j in rng.choice(len(dialogs) - 1, size=n - 1, replace=False)]
        cands = [responses[j] for j in others]
        gt = int(rng.integers(n))
        cands.insert(gt, d.utterances[-1])
        out.append(EvalInstance(d.utterances[:-1], cands, gt))
    return out


@dataclass
class SyntheticTask:
    corpus: DomainCorpus
    post_train_dialogs: list[Dialog]
    train: list[FineTuneExample]
    valid: list[EvalInstance]


def make_task(
    seed: int,
    num_dialogs: int = 2000,
    num_finetune: int = 200,
    num_valid: int = 200,
    n_candidates: int = 10,
    spec: DomainSpec | None = None,
) -> SyntheticTask:
    """A post-training corpus of ``num_dialogs`` dialogs, a small labeled
    1:1 fine-tuning set cut from it, and held-out n-candidate validation
    instances from fresh dialogs of the same domain."""
    corpus = DomainCorpus(spec, vocabulary_seed=seed)
    dialogs = corpus.dialogs(num_dialogs, seed=seed + 1, prefix="train-")
    valid_dialogs = corpus.dialogs(num_valid, seed=seed + 2, prefix="valid-")
    train = finetune_pairs(dialogs[:num_finetune], negatives=1, seed=seed + 3)
    valid = eval_instances(valid_dialogs, n_candidates, seed=seed + 4)
    return SyntheticTask(corpus, dialogs, train, valid)
