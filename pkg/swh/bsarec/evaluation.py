# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

"""Next-item ranking evaluation.

Ranks are pessimistic: every other candidate scoring at least as high as the
target is ranked before it, so ties always count against the target.
"""

from enum import Enum
import json
from typing import Callable, Dict, Iterable, Optional, Sequence, Union

import attr
import numpy as np
import torch

from swh.bsarec.data import SplitSequences, evaluation_inputs, iterate_batches
from swh.bsarec.error import ConfigError, EmptyEvaluation, InvalidArgument

CUTOFFS = (5, 10, 20)

Scorer = Callable[[torch.Tensor], torch.Tensor]


class Protocol(Enum):
    FULL = "full"
    SAMPLED = "sampled-99"


@attr.s(frozen=True, slots=True)
class MetricsReport:
    hr = attr.ib(type=Dict[int, float])
    ndcg = attr.ib(type=Dict[int, float])
    mrr = attr.ib(type=float)
    users = attr.ib(type=int)
    protocol = attr.ib(type=str, default=Protocol.FULL.value)
    seed = attr.ib(type=Optional[int], default=None)

    def as_dict(self) -> Dict[str, Union[float, int, str, None]]:
        row: Dict[str, Union[float, int, str, None]] = {}
        for k in sorted(self.hr):
            row[f"HR@{k}"] = self.hr[k]
        for k in sorted(self.ndcg):
            row[f"NDCG@{k}"] = self.ndcg[k]
        row.update(
            {"MRR": self.mrr, "users": self.users, "protocol": self.protocol}
        )
        if self.seed is not None:
            row["seed"] = self.seed
        return row

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        """Aligned ``metric value`` rows, HR then NDCG by cutoff"""
        rows = [(f"HR@{k}", self.hr[k]) for k in sorted(self.hr)]
        rows += [(f"NDCG@{k}", self.ndcg[k]) for k in sorted(self.ndcg)]
        rows.append(("MRR", self.mrr))
        width = max(len(name) for name, _ in rows)
        lines = [f"{'Metric'.ljust(width)}  {self.protocol}"]
        lines += [f"{name.ljust(width)}  {value:.4f}" for name, value in rows]
        return "\n".join(lines) + "\n"


def rank_of_target(
    scores: Union[torch.Tensor, Sequence[float]],
    target: int,
    candidates: Optional[Iterable[int]] = None,
) -> int:
    """1-based rank of item ``target`` among ``candidates`` (default: every
    item). ``scores[v - 1]`` is the score of item ``v``."""
    scores = torch.as_tensor(scores)
    if candidates is None:
        pool = torch.arange(1, scores.shape[-1] + 1)
    else:
        pool = torch.as_tensor(sorted(set(candidates)), dtype=torch.long)
    if not bool((pool == target).any()):
        raise InvalidArgument(f"target {target} is not among the candidates")
    others = pool[pool != target]
    return 1 + int((scores[others - 1] >= scores[target - 1]).sum())


def batch_ranks(
    scores: torch.Tensor, targets: torch.Tensor, excluded: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Ranks of ``targets`` [B] against every item not ``excluded`` [B, |V|]"""
    index = (targets - 1).unsqueeze(-1)
    target_scores = scores.gather(-1, index)
    ahead = scores >= target_scores
    ahead.scatter_(-1, index, torch.zeros_like(index, dtype=torch.bool))
    if excluded is not None:
        ahead &= ~excluded
    return 1 + ahead.sum(-1)


def compute_metrics(
    ranks: Iterable[int],
    cutoffs: Sequence[int] = CUTOFFS,
    protocol: str = Protocol.FULL.value,
    seed: Optional[int] = None,
) -> MetricsReport:
    ranks_array = np.asarray(list(ranks), dtype=np.float64)
    if ranks_array.size == 0:
        raise EmptyEvaluation("no rank to aggregate")
    if (ranks_array < 1).any():
        raise InvalidArgument("ranks are 1-based")
    gains = 1.0 / np.log2(ranks_array + 1.0)
    hr = {k: float(np.mean(ranks_array <= k)) for k in cutoffs}
    ndcg = {k: float(np.mean(np.where(ranks_array <= k, gains, 0.0))) for k in cutoffs}
    return MetricsReport(
        hr=hr,
        ndcg=ndcg,
        mrr=float(np.mean(1.0 / ranks_array)),
        users=int(ranks_array.size),
        protocol=protocol,
        seed=seed,
    )


def _scorer(model) -> Scorer:
    return getattr(model, "score", model)


def full_ranking_eval(
    model,
    splits: SplitSequences,
    max_len: int,
    stage: str = "test",
    mask_history: bool = True,
    batch_size: int = 256,
    cutoffs: Sequence[int] = CUTOFFS,
) -> MetricsReport:
    """Rank each ``stage`` target against the whole catalog.

    With ``mask_history``, the items of the user's input history are removed
    from the candidates, except the target itself.
    """
    score = _scorer(model)
    inputs, targets = evaluation_inputs(splits, max_len, stage)
    ranks = []
    for batch in iterate_batches(len(targets), batch_size, rng=None, shuffle=False):
        sequences = torch.from_numpy(inputs[batch])
        batch_targets = torch.from_numpy(targets[batch])
        with torch.no_grad():
            scores = score(sequences)
        excluded = None
        if mask_history:
            excluded = torch.zeros(scores.shape, dtype=torch.bool)
            for row, index in enumerate(batch):
                history = list(splits.history(int(index), stage))
                if history:
                    excluded[row, torch.as_tensor(history) - 1] = True
        ranks.append(batch_ranks(scores.cpu(), batch_targets, excluded))
    if not ranks:
        raise EmptyEvaluation(f"no user to evaluate on the {stage} stage")
    return compute_metrics(torch.cat(ranks).tolist(), cutoffs)


def sampled_eval_99(
    model,
    splits: SplitSequences,
    max_len: int,
    seed: int,
    stage: str = "test",
    num_negatives: int = 99,
    batch_size: int = 256,
    cutoffs: Sequence[int] = CUTOFFS,
) -> MetricsReport:
    """Rank each target among ``num_negatives`` items the user never
    interacted with, drawn uniformly with a generator seeded by ``seed``"""
    if splits.num_items < num_negatives + 1:
        raise ConfigError(
            [
                f"sampled protocol needs at least {num_negatives + 1} items, "
                f"catalog has {splits.num_items}"
            ]
        )
    rng = np.random.default_rng(seed)
    score = _scorer(model)
    catalog = np.arange(1, splits.num_items + 1)
    inputs, targets = evaluation_inputs(splits, max_len, stage)
    ranks = []
    for batch in iterate_batches(len(targets), batch_size, rng=None, shuffle=False):
        with torch.no_grad():
            scores = score(torch.from_numpy(inputs[batch])).cpu()
        for row, index in enumerate(batch):
            index = int(index)
            seen = set(splits.train[index])
            seen.update((splits.valid[index], splits.test[index]))
            pool = np.setdiff1d(catalog, np.fromiter(seen, dtype=np.int64))
            if pool.size < num_negatives:
                raise ConfigError(
                    [
                        f"user {splits.users[index]} leaves {pool.size} negative "
                        f"items, {num_negatives} are needed"
                    ]
                )
            negatives = rng.choice(pool, size=num_negatives, replace=False)
            target = int(targets[index])
            ranks.append(
                rank_of_target(scores[row], target, [target, *negatives.tolist()])
            )
    return compute_metrics(ranks, cutoffs, protocol=Protocol.SAMPLED.value, seed=seed)
