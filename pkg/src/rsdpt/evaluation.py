"""Pointwise candidate scoring and rank metrics (R_n@k, MRR)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autograd import no_grad
from .errors import DataError


@dataclass
class RankingRecord:
    scores: np.ndarray
    ground_truth_index: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or len(self.scores) == 0:
            raise DataError("scores must be a non-empty vector")
        if not np.isfinite(self.scores).all():
            raise DataError("scores must be finite")
        if not 0 <= self.ground_truth_index < len(self.scores):
            raise DataError(f"ground_truth_index {self.ground_truth_index} out of range")

    @property
    def n(self) -> int:
        return len(self.scores)


@dataclass
class Metrics:
    n: int
    recall_at: dict[int, float]
    mrr: float
    num_instances: int
    ranks: list[int] = field(default_factory=list, repr=False)

    def to_report(self) -> dict:
        report = {"n": self.n}
        for k in sorted(self.recall_at):
            report[f"R@{k}"] = self.recall_at[k]
        report["MRR"] = self.mrr
        report["num_instances"] = self.num_instances
        return report


def rank_of_truth(record: RankingRecord) -> int:
    """1-based rank of the ground truth; ties go to the lower index."""
    s = record.scores
    gt = record.ground_truth_index
    truth = s[gt]
    return 1 + int((s > truth).sum()) + int((s[:gt] == truth).sum())


def _uniform_n(records: Sequence[RankingRecord]) -> int:
    if not records:
        raise DataError("no records to evaluate")
    ns = {r.n for r in records}
    if len(ns) != 1:
        raise DataError(f"records mix candidate counts {sorted(ns)}")
    return ns.pop()


def recall_at_k(records: Sequence[RankingRecord], k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    _uniform_n(records)
    return sum(rank_of_truth(r) <= k for r in records) / len(records)


def mean_reciprocal_rank(records: Sequence[RankingRecord]) -> float:
    _uniform_n(records)
    return math.fsum(1.0 / rank_of_truth(r) for r in records) / len(records)


def compute_metrics(records: Sequence[RankingRecord], ks: Iterable[int] = (1, 2, 5)) -> Metrics:
    n = _uniform_n(records)
    ranks = [rank_of_truth(r) for r in records]
    recall = {}
    for k in ks:
        if k < 1:
            raise ValueError("k must be at least 1")
        recall[k] = sum(r <= k for r in ranks) / len(ranks)
    # correctly rounded sum, so the value does not depend on summation order
    mrr = math.fsum(1.0 / r for r in ranks) / len(ranks)
    return Metrics(n, recall, mrr, len(records), ranks)


def default_ks(n: int) -> tuple[int, ...]:
    """R_10@{1,2,5} for 10 candidates, R_100@{1,10,50} for 100."""
    if n == 100:
        return (1, 10, 50)
    return tuple(k for k in (1, 2, 5) if k <= n) or (1,)


def score_candidates(model, instance, tokenizer) -> RankingRecord:
    """Score every candidate against the context in one eval-mode batch."""
    if not instance.candidates:
        raise DataError("instance has no candidates")
    inputs = [tokenizer.model_input(instance.context, c) for c in instance.candidates]
    with no_grad():
        scores = model.score(inputs)
    return RankingRecord(scores.astype(np.float64), instance.ground_truth_index)


def score_instances(model, instances, tokenizer) -> list[RankingRecord]:
    return [score_candidates(model, inst, tokenizer) for inst in instances]


def evaluate(model, instances, tokenizer, ks: Iterable[int] | None = None, report_path=None, scores_path=None) -> Metrics:
    if not instances:
        raise DataError("empty evaluation set")
    records = score_instances(model, instances, tokenizer)
    if ks is None:
        ks = default_ks(records[0].n)
    metrics = compute_metrics(records, ks)
    if report_path is not None:
        write_report(metrics, report_path)
    if scores_path is not None:
        dump_scores(records, scores_path)
    return metrics


def write_report(metrics: Metrics, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics.to_report(), fh, indent=1)


def dump_scores(records: Sequence[RankingRecord], path) -> None:
    with open(path, "w") as fh:
        for i, r in enumerate(records):
            fh.write(json.dumps({"instance": i, "scores": r.scores.tolist(), "rank": rank_of_truth(r)}) + "\n")
