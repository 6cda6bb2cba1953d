# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

"""Interaction logs: loading, k-core filtering, leave-one-out splits and
fixed-length model inputs.

Input files hold one user per line, ``<user_token> <item_token> ...``, items
in chronological order. Items are re-indexed from 1 in order of first
appearance, 0 being the padding id; users are re-indexed from 1 the same way.
"""

from collections import Counter
import json
import logging
import os
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from swh.bsarec.error import EmptyDataset, InvalidArgument, InvalidInput, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


@attr.s(frozen=True, slots=True)
class DatasetStats:
    users = attr.ib(type=int)
    items = attr.ib(type=int)
    interactions = attr.ib(type=int)
    avg_length = attr.ib(type=float)
    sparsity = attr.ib(type=float)

    def to_json(self) -> str:
        return json.dumps(attr.asdict(self), indent=2, sort_keys=True) + "\n"


@attr.s(frozen=True, slots=True)
class InteractionLog:
    """Chronological item sequences with their re-indexing maps.

    ``sequences[u - 1]`` holds the item ids of user ``u``;
    ``user_tokens[u - 1]`` and ``item_tokens[i - 1]`` give back the tokens of
    the input file.
    """

    user_tokens = attr.ib(type=Tuple[str, ...], converter=tuple)
    item_tokens = attr.ib(type=Tuple[str, ...], converter=tuple)
    sequences = attr.ib(type=Tuple[Tuple[int, ...], ...], converter=tuple)

    @classmethod
    def from_tokens(cls, rows: Iterable[Tuple[str, Sequence[str]]]) -> "InteractionLog":
        item_index: Dict[str, int] = {}
        users, sequences = [], []
        for user, items in rows:
            users.append(user)
            sequence = []
            for item in items:
                if item not in item_index:
                    item_index[item] = len(item_index) + 1
                sequence.append(item_index[item])
            sequences.append(tuple(sequence))
        return cls(
            user_tokens=users, item_tokens=list(item_index), sequences=sequences
        )

    @property
    def num_users(self) -> int:
        return len(self.user_tokens)

    @property
    def num_items(self) -> int:
        return len(self.item_tokens)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def records(self) -> Iterator[Tuple[int, int, int]]:
        """(user id, item id, order index) triples"""
        for user, sequence in enumerate(self.sequences, start=1):
            for order, item in enumerate(sequence):
                yield user, item, order

    def decode_item(self, item: int) -> str:
        return self.item_tokens[item - 1]

    def encode_item(self, token: str) -> int:
        return self.item_tokens.index(token) + 1

    def token_rows(self) -> Iterator[Tuple[str, List[str]]]:
        for user, sequence in zip(self.user_tokens, self.sequences):
            yield user, [self.item_tokens[i - 1] for i in sequence]

    def stats(self) -> DatasetStats:
        interactions = self.num_interactions
        return DatasetStats(
            users=self.num_users,
            items=self.num_items,
            interactions=interactions,
            avg_length=round(interactions / self.num_users, 1),
            sparsity=round(1.0 - interactions / (self.num_users * self.num_items), 4),
        )


def load_interactions(path: PathLike) -> InteractionLog:
    """Read a one-line-per-user interaction file"""
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 2:
                raise ParseError(f"user {tokens[0]!r} has no item", lineno)
            if tokens[0] in seen:
                raise ParseError(f"user {tokens[0]!r} appears twice", lineno)
            seen.add(tokens[0])
            rows.append((tokens[0], tokens[1:]))
    if not rows:
        raise InvalidInput(f"{path} holds no interaction")
    log = InteractionLog.from_tokens(rows)
    stats = log.stats()
    logger.info(
        "Loaded %s: %d users, %d items, %d interactions, avg length %.1f, "
        "sparsity %.2f%%",
        path,
        stats.users,
        stats.items,
        stats.interactions,
        stats.avg_length,
        100 * stats.sparsity,
    )
    return log


def core_filter(log: InteractionLog, k: int) -> InteractionLog:
    """Drop users and items with fewer than ``k`` interactions until no more
    can be dropped, then re-index"""
    if k < 1:
        raise InvalidArgument(f"core threshold must be >= 1, got k={k}")
    rows = list(log.token_rows())
    while True:
        rows = [(user, items) for user, items in rows if len(items) >= k]
        item_counts = Counter(item for _, items in rows for item in items)
        kept = [
            (user, [item for item in items if item_counts[item] >= k])
            for user, items in rows
        ]
        kept = [(user, items) for user, items in kept if items]
        if sum(len(i) for _, i in kept) == sum(len(i) for _, i in rows):
            break
        rows = kept
    if not kept:
        raise EmptyDataset(f"{k}-core filtering removed every interaction")
    filtered = InteractionLog.from_tokens(kept)
    logger.info(
        "%d-core: %d -> %d users, %d -> %d items",
        k,
        log.num_users,
        filtered.num_users,
        log.num_items,
        filtered.num_items,
    )
    return filtered


def write_processed(log: InteractionLog, path: PathLike) -> str:
    """Write ``log`` with integer ids and its statistics next to it.

    Returns the path of the JSON statistics file.
    """
    with open(path, "w", encoding="utf-8") as f:
        for user, sequence in enumerate(log.sequences, start=1):
            f.write(" ".join(str(t) for t in (user, *sequence)) + "\n")
    stats_path = f"{path}.stats.json"
    with open(stats_path, "w", encoding="utf-8") as f:
        f.write(log.stats().to_json())
    return stats_path


@attr.s(frozen=True, slots=True)
class SplitSequences:
    """Leave-one-out split: the last item of each user is the test target,
    the one before the validation target, the rest the training prefix"""

    users = attr.ib(type=Tuple[int, ...], converter=tuple)
    train = attr.ib(type=Tuple[Tuple[int, ...], ...], converter=tuple)
    valid = attr.ib(type=Tuple[int, ...], converter=tuple)
    test = attr.ib(type=Tuple[int, ...], converter=tuple)
    num_items = attr.ib(type=int)
    dropped = attr.ib(type=int, default=0)

    def __len__(self) -> int:
        return len(self.users)

    def history(self, index: int, stage: str) -> Tuple[int, ...]:
        """Items known before the ``stage`` target of the ``index``-th user"""
        if stage == "valid":
            return self.train[index]
        if stage == "test":
            return self.train[index] + (self.valid[index],)
        raise InvalidArgument(f"unknown stage {stage!r}, expected valid or test")

    def target(self, index: int, stage: str) -> int:
        self.history(index, stage)
        return self.valid[index] if stage == "valid" else self.test[index]


def split_leave_one_out(log: InteractionLog) -> SplitSequences:
    users, train, valid, test = [], [], [], []
    dropped = 0
    for user, sequence in enumerate(log.sequences, start=1):
        if len(sequence) < 3:
            dropped += 1
            continue
        users.append(user)
        train.append(sequence[:-2])
        valid.append(sequence[-2])
        test.append(sequence[-1])
    if dropped:
        logger.warning("Dropped %d users with fewer than 3 interactions", dropped)
    return SplitSequences(
        users=users,
        train=train,
        valid=valid,
        test=test,
        num_items=log.num_items,
        dropped=dropped,
    )


def pad_truncate(items: Sequence[int], max_len: int) -> np.ndarray:
    """Keep the ``max_len`` most recent items, right-aligned, zeros in front"""
    if max_len < 1:
        raise InvalidArgument(f"max_len must be >= 1, got {max_len}")
    padded = np.zeros(max_len, dtype=np.int64)
    recent = list(items)[-max_len:]
    if recent:
        padded[max_len - len(recent) :] = recent
    return padded


def training_examples(
    splits: SplitSequences,
    max_len: int,
    augment_prefixes: bool = True,
    train_on_validation: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Padded inputs ``[M, max_len]`` and next-item targets ``[M]``.

    Without augmentation each user yields one example, the training sequence
    minus its last item; with it, every prefix of the training sequence
    predicts the item that follows it.
    """
    inputs, targets = [], []
    for index in range(len(splits)):
        sequence = list(splits.train[index])
        if train_on_validation:
            sequence.append(splits.valid[index])
        ends = range(1, len(sequence)) if augment_prefixes else [len(sequence) - 1]
        for end in ends:
            if end < 1:
                continue
            inputs.append(pad_truncate(sequence[:end], max_len))
            targets.append(sequence[end])
    if not inputs:
        raise EmptyDataset("no training example: every training prefix is too short")
    return np.stack(inputs), np.asarray(targets, dtype=np.int64)


def evaluation_inputs(
    splits: SplitSequences, max_len: int, stage: str
) -> Tuple[np.ndarray, np.ndarray]:
    """Padded histories ``[U, max_len]`` and ``stage`` targets ``[U]``"""
    inputs = [
        pad_truncate(splits.history(i, stage), max_len) for i in range(len(splits))
    ]
    targets = [splits.target(i, stage) for i in range(len(splits))]
    return np.stack(inputs), np.asarray(targets, dtype=np.int64)


def iterate_batches(
    size: int,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    shuffle: bool = True,
) -> Iterator[np.ndarray]:
    """Index batches partitioning ``range(size)``, each index exactly once"""
    if batch_size < 1:
        raise InvalidArgument(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        if rng is None:
            raise InvalidArgument("shuffled batches need a random generator")
        order = rng.permutation(size)
    else:
        order = np.arange(size)
    for start in range(0, size, batch_size):
        yield order[start : start + batch_size]


def synthetic_cycle_log(
    num_users: int = 200, cycle: int = 6, length: int = 20, seed: int = 0
) -> InteractionLog:
    """Users walking a fixed cycle of ``cycle`` items from random offsets, so
    the next item is a function of the last one"""
    rng = np.random.default_rng(seed)
    rows = []
    for user in range(1, num_users + 1):
        offset = int(rng.integers(cycle))
        rows.append(
            (f"u{user}", [f"i{(offset + t) % cycle + 1}" for t in range(length)])
        )
    return InteractionLog.from_tokens(rows)
