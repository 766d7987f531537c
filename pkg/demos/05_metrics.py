"""Rank metrics on hand-made score lists, including ties."""

from rsdpt.evaluation import RankingRecord, compute_metrics, rank_of_truth

records = [
    RankingRecord([0.1, 0.9, 0.5], 1),  # truth on top
    RankingRecord([0.7, 0.2, 0.7], 2),  # tie with a lower index, so rank 2
    RankingRecord([0.4, 0.3, 0.2], 2),  # last
]
print("ranks:", [rank_of_truth(r) for r in records])
print(compute_metrics(records, ks=(1, 2, 3)).to_report())
