"""Market entities, bid recording, and owner-to-consumer matching mechanisms."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError
from .nn import Mlp


@dataclass
class DataOwner:
    """A device holding one labeled training shard; recruitable by one consumer per round."""

    id: int
    train_shard: LabeledDataset
    label_set: frozenset[int]

    def __post_init__(self) -> None:
        if len(self.train_shard) == 0:
            raise ValueError(f"owner {self.id}: empty training shard")
        held = set(np.unique(self.train_shard.labels).tolist())
        if not held <= set(self.label_set):
            raise ValueError(f"owner {self.id}: shard labels {sorted(held)} outside label set")


@dataclass
class DataConsumer:
    """A party training a model for its label set, with a validation shard and budget.

    Synthetic consumers embody alliances: they bid and train like real ones
    but never join alliances and their bids are not recorded in history.
    ``expert`` is the model a real consumer keeps training on its non-alliance
    owners once it participates in one.
    """

    id: int
    label_set: frozenset[int]
    model: Mlp
    validation_shard: LabeledDataset
    budget: float = 0.0
    is_synthetic: bool = False
    expert: Mlp | None = None

    def __post_init__(self) -> None:
        if not self.label_set:
            raise ValueError(f"consumer {self.id}: empty label set")
        if self.budget < 0:
            raise ValueError(f"consumer {self.id}: negative budget")
        if len(self.validation_shard):
            held = set(np.unique(self.validation_shard.labels).tolist())
            if not held <= set(self.label_set):
                raise ValueError(
                    f"consumer {self.id}: validation labels {sorted(held)} outside label set"
                )


class BiddingHistory:
    """Ring buffer of the last k rounds of the (m consumers x n owners) bid matrix.

    Slots are zero until written, so the stored span is always exactly k.
    Only real consumers' rows belong here.
    """

    def __init__(self, k: int, n_consumers: int, n_owners: int) -> None:
        if k < 1:
            raise ValueError("history span must be >= 1")
        self.k = k
        self.window = np.zeros((k, n_consumers, n_owners))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.window.shape  # type: ignore[return-value]


def record_bids(history: BiddingHistory, round_index: int, bids: np.ndarray) -> BiddingHistory:
    """Store ``bids`` in slot ``round_index mod k``; other slots untouched."""
    b = np.asarray(bids, dtype=float)
    if b.shape != history.window.shape[1:]:
        raise ValueError(
            f"bid matrix shape {b.shape} does not match history shape {history.window.shape[1:]}"
        )
    if (b < 0).any():
        raise ValueError("bid matrix contains negative entries")
    history.window[round_index % history.k] = b
    return history


def max_bid_matrix(history: BiddingHistory) -> np.ndarray:
    """Elementwise maximum bid over the stored rounds."""
    return history.window.max(axis=0)


@dataclass
class Matching:
    """Owner id -> consumer id; an absent owner is unmatched this round."""

    assignment: dict[int, int] = field(default_factory=dict)

    def owners_of(self, consumer_id: int) -> list[int]:
        return sorted(o for o, c in self.assignment.items() if c == consumer_id)


def default_bids(
    consumers: Sequence[DataConsumer],
    owners: Sequence[DataOwner],
    excluded: Mapping[int, frozenset[int]] | None = None,
) -> np.ndarray:
    """Default bidding behavior: 1.0 on every owner with overlapping labels.

    ``excluded`` maps a consumer id to owner ids it abstains from (owners its
    alliance recruits instead).
    """
    bids = np.zeros((len(consumers), len(owners)))
    for i, c in enumerate(consumers):
        skip = excluded.get(c.id, frozenset()) if excluded else frozenset()
        for j, o in enumerate(owners):
            if o.id not in skip and c.label_set & o.label_set:
                bids[i, j] = 1.0
    return bids


def match_random_partition(
    contested: set[int] | frozenset[int],
    consumers: Sequence[int],
    per_dc: int,
    uncontested: Mapping[int, int],
    seed: int | list[int],
) -> Matching:
    """Uniformly partition contested owners, ``per_dc`` to each consumer.

    Uncontested owners go straight to their unique interested consumer.
    Deterministic per seed.
    """
    if len(contested) != per_dc * len(consumers):
        raise ConfigError(
            f"{len(contested)} contested owners cannot be split {per_dc} apiece "
            f"over {len(consumers)} consumers"
        )
    assignment = dict(sorted(uncontested.items()))
    order = np.array(sorted(contested), dtype=np.int64)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    for i, cid in enumerate(consumers):
        for o in order[i * per_dc : (i + 1) * per_dc]:
            assignment[int(o)] = cid
    return Matching(assignment)


def match_first_price(bids: np.ndarray, budgets: Mapping[int, float]) -> Matching:
    """First-price greedy matching: each owner to its highest affordable bidder.

    Ties go to the lowest consumer index; winners pay their bid out of the
    remaining budget. Owners nobody bids on (affordably) stay unmatched.
    """
    b = np.asarray(bids, dtype=float)
    remaining = dict(budgets)
    assignment: dict[int, int] = {}
    for o in range(b.shape[1]):
        best_cid = -1
        best_bid = 0.0
        for cid in range(b.shape[0]):
            amount = b[cid, o]
            if amount <= 0 or remaining.get(cid, 0.0) < amount:
                continue
            if amount > best_bid:
                best_bid = amount
                best_cid = cid
        if best_cid >= 0:
            assignment[o] = best_cid
            remaining[best_cid] -= best_bid
    return Matching(assignment)
