import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsdpt.corpus import EvalInstance
from rsdpt.encoder import Encoder, EncoderConfig
from rsdpt.errors import DataError
from rsdpt.evaluation import (
    RankingRecord,
    compute_metrics,
    default_ks,
    evaluate,
    mean_reciprocal_rank,
    rank_of_truth,
    recall_at_k,
    score_candidates,
)


def record_with_rank(rank, n=10):
    scores = np.linspace(1.0, 0.1, n)
    return RankingRecord(scores, rank - 1)


def sorted_rank(scores, gt):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(gt) + 1


def test_rank_examples():
    assert rank_of_truth(RankingRecord([0.1, 0.9, 0.5], 1)) == 1
    assert rank_of_truth(RankingRecord([0.3] * 5, 0)) == 1
    assert rank_of_truth(RankingRecord([0.3] * 5, 4)) == 5
    assert rank_of_truth(RankingRecord([0.2, 0.1, 0.8, 0.3], 2)) == 1


def test_recall_examples():
    recs = [record_with_rank(1), record_with_rank(3)]
    assert recall_at_k(recs, 1) == 0.5
    assert recall_at_k(recs, 2) == 0.5
    assert recall_at_k(recs, 5) == 1.0
    assert recall_at_k(recs, 10) == 1.0
    assert recall_at_k([record_with_rank(1)] * 3, 1) == 1.0


def test_mrr_examples():
    assert mean_reciprocal_rank([record_with_rank(1), record_with_rank(4)]) == 0.625
    assert mean_reciprocal_rank([record_with_rank(1)] * 4) == 1.0


def test_errors():
    with pytest.raises(DataError, match="mix"):
        recall_at_k([record_with_rank(1, 10), record_with_rank(1, 5)], 1)
    with pytest.raises(DataError):
        RankingRecord([0.1, np.nan], 0)
    with pytest.raises(DataError):
        RankingRecord([0.1, 0.2], 2)
    with pytest.raises(DataError):
        mean_reciprocal_rank([])


def test_report_shape():
    m = compute_metrics([record_with_rank(1), record_with_rank(3)], (1, 2, 5))
    assert m.to_report() == {"n": 10, "R@1": 0.5, "R@2": 0.5, "R@5": 1.0, "MRR": pytest.approx(2 / 3), "num_instances": 2}
    assert default_ks(10) == (1, 2, 5) and default_ks(100) == (1, 10, 50)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=12), st.data())
def test_against_sorter(raw, data):
    gt = data.draw(st.integers(0, len(raw) - 1))
    assert rank_of_truth(RankingRecord(np.array(raw, float), gt)) == sorted_rank(raw, gt)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_and_rank_based(seed):
    rng = np.random.default_rng(seed)
    recs = [RankingRecord(rng.integers(0, 5, 10).astype(float), int(rng.integers(10))) for _ in range(20)]
    m = compute_metrics(recs, (1, 2, 5, 10))
    assert m.recall_at[1] <= m.recall_at[2] <= m.recall_at[5] <= m.recall_at[10] == 1.0
    assert m.mrr >= m.recall_at[1]
    warped = [RankingRecord(np.exp(r.scores) * 3 + 1, r.ground_truth_index) for r in recs]
    assert compute_metrics(warped, (1, 2, 5, 10)).to_report() == m.to_report()


@pytest.fixture
def zero_head_model(vocab):
    m = Encoder(EncoderConfig(num_layers=1, hidden_size=16, num_heads=2, ff_size=32, vocab_size=len(vocab), max_positions=32))
    m.params["rs.weight"].data[:] = 0
    return m


def test_score_candidates(vocab, tokenizer, zero_head_model):
    inst = EvalInstance(["how do i install cuda"], ["python3 is the default"] * 2 + [f"grub {i}" for i in range(8)], 3)
    rec = score_candidates(zero_head_model, inst, tokenizer)
    assert rec.n == 10 and np.all(rec.scores == 0.5)
    zero_head_model.params["rs.weight"].data[:] = np.random.default_rng(0).normal(size=(16, 1))
    rec = score_candidates(zero_head_model, inst, tokenizer)
    assert np.all((rec.scores > 0) & (rec.scores < 1))
    assert rec.scores[0] == rec.scores[1]


def test_evaluate_writes_artifacts(tokenizer, zero_head_model, tmp_path):
    inst = [EvalInstance(["my wifi is down"], ["a", "b", "c"], i) for i in range(3)]
    m = evaluate(zero_head_model, inst, tokenizer, report_path=tmp_path / "r.json", scores_path=tmp_path / "s.jsonl")
    # all scores tie, so the truth ranks by index
    assert m.ranks == [1, 2, 3]
    assert json.loads((tmp_path / "r.json").read_text())["num_instances"] == 3
    rows = [json.loads(line) for line in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert [r["rank"] for r in rows] == [1, 2, 3] and set(rows[0]) == {"instance", "scores", "rank"}
    with pytest.raises(DataError):
        evaluate(zero_head_model, [], tokenizer)
