"""Alliance detection and creation.

Pipeline: enumerate candidate consumer coalitions from the bidding history,
collect accept/conflict responses from each consumer against anonymized
offers, pick the optimal compatible set by solving a weighted max-clique
problem, and instantiate each winner as a synthetic consumer with a pooled
budget.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .data import LabeledDataset
from .market import BiddingHistory, DataConsumer, DataOwner, max_bid_matrix
from .maxclique import WeightedGraph, solve
from .nn import init_mlp

log = logging.getLogger(__name__)

MAX_ENUMERABLE_CONSUMERS = 20

DEFAULT_MIN_SHARED_LABELS = 2
DEFAULT_MIN_SHARED_OWNERS = 2


@dataclass(frozen=True)
class AllianceCandidate:
    """A possible coalition: who, which shared labels, which contested owners."""

    uid: int
    participants: frozenset[int]
    shared_labels: frozenset[int]
    contested: frozenset[int]

    def key(self) -> tuple[frozenset[int], frozenset[int]]:
        """Identity for deduplication against already-created alliances."""
        return (self.participants, self.shared_labels)


@dataclass(frozen=True)
class AnonOffer:
    """What a consumer sees about a candidate: size, never identities."""

    uid: int
    n_participants: int
    shared_labels: frozenset[int]
    contested: frozenset[int]


@dataclass
class DCResponse:
    accepted: set[int] = field(default_factory=set)
    rejected_pairs: set[tuple[int, int]] = field(default_factory=set)


@dataclass
class Alliance:
    """An instantiated coalition: its synthetic consumer and the money trail."""

    candidate: AllianceCandidate
    consumer: DataConsumer
    payments: dict[int, float]
    effective_budgets: dict[int, float]
    validation_refs: dict[int, LabeledDataset]
    created_round: int = 0

    @property
    def budget(self) -> float:
        return sum(self.payments.values())


PolicyFn = Callable[[DataConsumer, list[AnonOffer]], DCResponse]


def enumerate_candidates(
    consumers: Sequence[DataConsumer],
    owners: Sequence[DataOwner],
    history: BiddingHistory,
    min_shared_labels: int = DEFAULT_MIN_SHARED_LABELS,
    min_shared_owners: int = DEFAULT_MIN_SHARED_OWNERS,
    uid_start: int = 0,
) -> list[AllianceCandidate]:
    """All consumer subsets whose shared task and contested owners pass the thresholds.

    An owner is contested by a subset iff every member bid positively on it
    at some point in the history window (nonzero product of max bids).
    """
    if len(consumers) > MAX_ENUMERABLE_CONSUMERS:
        raise ValueError(
            f"{len(consumers)} consumers exceeds the subset-enumeration guard "
            f"({MAX_ENUMERABLE_CONSUMERS})"
        )
    if any(c.is_synthetic for c in consumers):
        raise ValueError("synthetic consumers cannot join alliances")
    bmax = max_bid_matrix(history)
    by_id = {c.id: c for c in consumers}
    ids = sorted(by_id)
    row = {cid: i for i, cid in enumerate(ids)}
    owner_ids = np.array([o.id for o in owners])

    out: list[AllianceCandidate] = []
    uid = uid_start
    for size in range(2, len(ids) + 1):
        for subset in combinations(ids, size):
            shared = frozenset.intersection(*(by_id[c].label_set for c in subset))
            if len(shared) < min_shared_labels:
                continue
            product = np.prod(bmax[[row[c] for c in subset], :], axis=0)
            contested = frozenset(int(o) for o in owner_ids[product > 0])
            if len(contested) < min_shared_owners:
                continue
            out.append(AllianceCandidate(uid, frozenset(subset), shared, contested))
            uid += 1
    return out


def candidate_value(c: AllianceCandidate) -> int:
    """Objective weight: participants x shared labels x contested owners."""
    return len(c.participants) * len(c.shared_labels) * len(c.contested)


def default_policy(consumer: DataConsumer, offers: list[AnonOffer]) -> DCResponse:
    """Accept everything; flag near-duplicate pairs as conflicting.

    Two offers conflict when their label sets overlap in at least half of the
    smaller one, which weeds out the stack of near-identical alliances the
    enumeration produces.
    """
    accepted = {o.uid for o in offers}
    rejected: set[tuple[int, int]] = set()
    for a, b in combinations(sorted(offers, key=lambda o: o.uid), 2):
        overlap = len(a.shared_labels & b.shared_labels)
        if 2 * overlap >= min(len(a.shared_labels), len(b.shared_labels)):
            rejected.add((a.uid, b.uid))
    return DCResponse(accepted, rejected)


def offer_and_collect(
    candidates: Sequence[AllianceCandidate],
    consumers: Sequence[DataConsumer],
    policy: PolicyFn = default_policy,
) -> tuple[list[AllianceCandidate], set[tuple[int, int]]]:
    """Anonymized offer round: a candidate survives only if all members accept.

    Returns the surviving candidates and the union of all rejected pairs.
    A response referencing an unknown uid is discarded (and logged), which
    makes that consumer's offers fail the unanimity rule.
    """
    accepted_by: dict[int, set[int]] = {}
    conflicts: set[tuple[int, int]] = set()
    for consumer in consumers:
        mine = [c for c in candidates if consumer.id in c.participants]
        if not mine:
            continue
        offers = [
            AnonOffer(c.uid, len(c.participants), c.shared_labels, c.contested)
            for c in mine
        ]
        response = policy(consumer, offers)
        known = {c.uid for c in mine}
        referenced = set(response.accepted) | {u for pair in response.rejected_pairs for u in pair}
        if not referenced <= known:
            log.warning(
                "consumer %d response references unknown uids %s; response rejected",
                consumer.id,
                sorted(referenced - known),
            )
            accepted_by[consumer.id] = set()
            continue
        accepted_by[consumer.id] = set(response.accepted)
        conflicts.update(tuple(sorted(p)) for p in response.rejected_pairs)
    surviving = [
        c
        for c in candidates
        if all(c.uid in accepted_by.get(pid, set()) for pid in c.participants)
    ]
    return surviving, conflicts


def select_alliances(
    accepted: Sequence[AllianceCandidate],
    conflicts: set[tuple[int, int]],
) -> list[AllianceCandidate]:
    """Maximum-total-value conflict-free subset, via the weighted max-clique solver."""
    if not accepted:
        return []
    ordered = sorted(accepted, key=lambda c: c.uid)
    norm = {tuple(sorted(p)) for p in conflicts}
    n = len(ordered)
    adj = np.ones((n, n), dtype=bool)
    np.fill_diagonal(adj, False)
    for i in range(n):
        for j in range(i + 1, n):
            if (ordered[i].uid, ordered[j].uid) in norm or (
                ordered[j].uid,
                ordered[i].uid,
            ) in norm:
                adj[i, j] = adj[j, i] = False
    graph = WeightedGraph([candidate_value(c) for c in ordered], adj)
    chosen, _ = solve(graph)
    return [ordered[i] for i in sorted(chosen)]


def instantiate(
    selected: Sequence[AllianceCandidate],
    consumers: Sequence[DataConsumer],
    budget_share: float,
    hidden_dims: list[int],
    rng: np.random.Generator,
    id_start: int,
    created_round: int = 0,
) -> list[Alliance]:
    """Create a synthetic consumer per selected candidate and split the budget.

    The synthetic model predicts over the union of the participants' label
    sets; its task (and bidding interest) is the shared label set, and its
    validation data is each participant's validation samples restricted to
    the shared labels. Participants pay ``budget_share`` each; a candidate
    whose participant cannot afford it is skipped.
    """
    by_id = {c.id: c for c in consumers}
    template = consumers[0].model if consumers else None
    out: list[Alliance] = []
    next_id = id_start
    for cand in sorted(selected, key=lambda c: c.uid):
        members = [by_id[p] for p in sorted(cand.participants)]
        poorest = min(m.budget for m in members)
        if budget_share > poorest:
            log.warning(
                "alliance %d skipped: budget share %.3f exceeds a participant budget %.3f",
                cand.uid,
                budget_share,
                poorest,
            )
            continue
        union_labels = frozenset.union(*(m.label_set for m in members))
        assert template is not None
        model = init_mlp(
            template.dims[0], hidden_dims, template.num_classes, union_labels, rng
        )
        refs = {m.id: _filter_shard(m.validation_shard, cand.shared_labels) for m in members}
        val = _concat_shards([refs[m.id] for m in members])
        payments = {m.id: float(budget_share) for m in members}
        before = {m.id: m.budget for m in members}
        for m in members:
            m.budget -= budget_share
        effective = {
            m.id: before[m.id] + sum(payments[o.id] for o in members if o.id != m.id)
            for m in members
        }
        synthetic = DataConsumer(
            id=next_id,
            label_set=cand.shared_labels,
            model=model,
            validation_shard=val,
            budget=float(sum(payments.values())),
            is_synthetic=True,
        )
        out.append(
            Alliance(cand, synthetic, payments, effective, refs, created_round)
        )
        next_id += 1
    return out


def _filter_shard(shard: LabeledDataset, labels: frozenset[int]) -> LabeledDataset:
    keep = np.isin(shard.labels, sorted(labels))
    return LabeledDataset(shard.features[keep], shard.labels[keep], shard.num_classes)


def _concat_shards(shards: list[LabeledDataset]) -> LabeledDataset:
    feats = np.concatenate([s.features for s in shards])
    labels = np.concatenate([s.labels for s in shards])
    return LabeledDataset(feats, labels, shards[0].num_classes)


def create_alliances(
    consumers: Sequence[DataConsumer],
    owners: Sequence[DataOwner],
    history: BiddingHistory,
    min_shared_labels: int,
    min_shared_owners: int,
    budget_share: float,
    hidden_dims: list[int],
    rng: np.random.Generator,
    existing: set[tuple[frozenset[int], frozenset[int]]],
    uid_start: int,
    id_start: int,
    created_round: int = 0,
    policy: PolicyFn = default_policy,
) -> tuple[list[Alliance], int]:
    """Full creation pass: enumerate, dedup, offer, select, instantiate.

    Returns the new alliances and the next fresh uid.
    """
    candidates = enumerate_candidates(
        consumers, owners, history, min_shared_labels, min_shared_owners, uid_start
    )
    next_uid = max((c.uid for c in candidates), default=uid_start - 1) + 1
    candidates = [c for c in candidates if c.key() not in existing]
    if not candidates:
        return [], next_uid
    accepted, conflicts = offer_and_collect(candidates, consumers, policy)
    selected = select_alliances(accepted, conflicts)
    created = instantiate(
        selected, consumers, budget_share, hidden_dims, rng, id_start, created_round
    )
    return created, next_uid
