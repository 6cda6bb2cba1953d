# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

import json
import math
import os

import numpy as np
import pytest
import torch

from swh.bsarec.data import (
    InteractionLog,
    load_interactions,
    pad_truncate,
    split_leave_one_out,
    synthetic_cycle_log,
)
from swh.bsarec.error import ConfigError, EmptyEvaluation, InvalidArgument
from swh.bsarec.evaluation import (
    batch_ranks,
    compute_metrics,
    full_ranking_eval,
    rank_of_target,
    sampled_eval_99,
)


def tied_scores(num_items: int):
    """Deterministic scorer with many ties, a function of the input only"""

    def score(sequences: torch.Tensor) -> torch.Tensor:
        items = torch.arange(1, num_items + 1)
        total = sequences.sum(-1, keepdim=True)
        return ((total * 7 + items * 3) % 5).to(torch.float64)

    return score


def random_scores(num_items: int, seed: int):
    generator = torch.Generator().manual_seed(seed)

    def score(sequences: torch.Tensor) -> torch.Tensor:
        return torch.rand(len(sequences), num_items, generator=generator)

    return score


def sorted_rank(scores, target, candidates):
    """Position of ``target`` once candidates are sorted by decreasing score,
    the target placed after every candidate it ties with"""
    order = sorted(candidates, key=lambda v: (-float(scores[v - 1]), v == target))
    return order.index(target) + 1


def test_rank_of_target():
    scores = [0.1, 0.5, 0.3]
    assert rank_of_target(scores, 2) == 1
    assert rank_of_target(scores, 1) == 3
    assert rank_of_target([1.0, 1.0, 1.0], 2) == 3
    assert rank_of_target(scores, 1, candidates=[1, 3]) == 2
    with pytest.raises(InvalidArgument):
        rank_of_target(scores, 2, candidates=[1, 3])


def test_batch_ranks_with_exclusions():
    scores = torch.tensor([[0.9, 0.8, 0.7, 0.6], [0.1, 0.1, 0.1, 0.1]])
    targets = torch.tensor([3, 1])
    assert batch_ranks(scores, targets).tolist() == [3, 4]
    excluded = torch.tensor([[True, False, True, False], [True, True, False, False]])
    assert batch_ranks(scores, targets, excluded).tolist() == [2, 3]


def test_ranks_ignore_increasing_transforms():
    scores = torch.randn(20, 30, dtype=torch.float64)
    targets = torch.randint(1, 31, (20,))
    transformed = 3.0 * torch.exp(scores) + 1.0
    assert torch.equal(batch_ranks(scores, targets), batch_ranks(transformed, targets))


def test_compute_metrics_examples():
    report = compute_metrics([1, 11])
    assert report.hr[10] == 0.5
    assert report.ndcg[10] == 0.5
    assert report.mrr == pytest.approx((1 + 1 / 11) / 2)
    assert report.users == 2

    report = compute_metrics([3])
    assert report.hr == {5: 1.0, 10: 1.0, 20: 1.0}
    assert report.ndcg[5] == pytest.approx(0.5)
    assert report.mrr == pytest.approx(1 / 3)

    with pytest.raises(EmptyEvaluation):
        compute_metrics([])
    with pytest.raises(InvalidArgument):
        compute_metrics([0, 1])


def test_metric_invariants():
    rng = np.random.default_rng(0)
    for _ in range(20):
        report = compute_metrics(rng.integers(1, 40, size=50).tolist())
        assert 0 <= report.hr[5] <= report.hr[10] <= report.hr[20] <= 1
        for k in (5, 10, 20):
            assert 0 <= report.ndcg[k] <= report.hr[k]
        assert 0 < report.mrr <= 1


def test_report_formats():
    report = compute_metrics([1, 2, 30], protocol="sampled-99", seed=4)
    row = json.loads(report.to_json())
    assert list(row) == [
        "HR@5",
        "HR@10",
        "HR@20",
        "NDCG@5",
        "NDCG@10",
        "NDCG@20",
        "MRR",
        "users",
        "protocol",
        "seed",
    ]
    assert row["HR@5"] == pytest.approx(2 / 3)
    lines = report.to_table().splitlines()
    assert lines[0].split() == ["Metric", "sampled-99"]
    assert lines[1].split() == ["HR@5", "0.6667"]
    assert lines[-1].split()[0] == "MRR"


@pytest.mark.parametrize("stage", ["valid", "test"])
@pytest.mark.parametrize("mask_history", [True, False])
def test_full_ranking_matches_sort_oracle(datadir, stage, mask_history):
    splits = split_leave_one_out(load_interactions(os.path.join(datadir, "toy.txt")))
    assert (len(splits), splits.num_items) == (5, 12)
    score = tied_scores(12)
    report = full_ranking_eval(
        score, splits, 4, stage=stage, mask_history=mask_history, batch_size=2
    )

    ranks = []
    for index in range(len(splits)):
        history = splits.history(index, stage)
        target = splits.target(index, stage)
        scores = score(torch.from_numpy(pad_truncate(history, 4)).unsqueeze(0))[0]
        candidates = set(range(1, 13))
        if mask_history:
            candidates -= set(history)
        candidates.add(target)
        ranks.append(sorted_rank(scores, target, candidates))
    expected = compute_metrics(ranks)
    assert report.hr == expected.hr
    assert report.ndcg == expected.ndcg
    assert report.mrr == expected.mrr


def test_history_masking_only_improves_ranks(datadir):
    splits = split_leave_one_out(load_interactions(os.path.join(datadir, "toy.txt")))
    score = random_scores(12, seed=0)
    masked = full_ranking_eval(score, splits, 4)
    score = random_scores(12, seed=0)
    unmasked = full_ranking_eval(score, splits, 4, mask_history=False)
    assert masked.mrr >= unmasked.mrr


def test_perfect_model():
    log = synthetic_cycle_log(num_users=30, cycle=6, length=8)
    successor = {}
    for sequence in log.sequences:
        successor.update(zip(sequence, sequence[1:]))

    def score(sequences):
        scores = torch.zeros(len(sequences), 6)
        for row, sequence in enumerate(sequences):
            scores[row, successor[int(sequence[-1])] - 1] = 1.0
        return scores

    report = full_ranking_eval(score, split_leave_one_out(log), 5)
    assert report.hr[5] == 1.0
    assert report.ndcg[5] == 1.0
    assert report.mrr == 1.0
    assert math.isclose(report.hr[20], 1.0)


def wide_log(users: int, items: int, seed: int = 0) -> InteractionLog:
    rng = np.random.default_rng(seed)
    rows = [
        (f"u{u}", [f"i{int(i)}" for i in rng.choice(items, size=5, replace=False)])
        for u in range(users)
    ]
    return InteractionLog.from_tokens(rows)


def test_sampled_protocol_on_random_scores():
    splits = split_leave_one_out(wide_log(4000, 300))
    report = sampled_eval_99(
        random_scores(splits.num_items, seed=1), splits, 5, seed=0
    )
    assert report.protocol == "sampled-99"
    assert report.seed == 0
    assert report.users == 4000
    assert 0.08 <= report.hr[10] <= 0.12


def test_sampled_protocol_is_reproducible():
    splits = split_leave_one_out(wide_log(100, 150))
    score = tied_scores(splits.num_items)
    first = sampled_eval_99(score, splits, 5, seed=3)
    second = sampled_eval_99(score, splits, 5, seed=3)
    assert first == second


def test_sampled_ranks_never_exceed_full_ranks():
    splits = split_leave_one_out(wide_log(200, 150))
    score = tied_scores(splits.num_items)
    full = full_ranking_eval(score, splits, 5)
    sampled = sampled_eval_99(score, splits, 5, seed=0)
    for k in (5, 10, 20):
        assert sampled.hr[k] >= full.hr[k]
    assert sampled.mrr >= full.mrr


def test_sampled_protocol_needs_a_large_catalog(datadir):
    splits = split_leave_one_out(load_interactions(os.path.join(datadir, "toy.txt")))
    with pytest.raises(ConfigError, match="12"):
        sampled_eval_99(tied_scores(12), splits, 4, seed=0)
