"""Scenario orchestration: market round loop, metric traces, and reports.

Three scenarios share one data partition: ``unrestricted`` (every consumer
recruits every interested owner), ``restricted`` (contested owners split by
the matching mechanism), and ``fedcdc`` (restricted, plus alliances formed
from the bidding history whose models are merged into each participant's
global model by distillation every round).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alliances import Alliance, candidate_value, create_alliances
from .data import (
    LabeledDataset,
    PartitionSpec,
    UnlabeledDataset,
    build_market_partition,
    gen_blobs,
    load_idx,
    split_per_class,
    take_class_balanced,
)
from .distill import DistillConfig, TeacherEnsemble, distill_train
from .errors import ConfigError
from .fed import FLRoundConfig, evaluate, run_fl_round
from .market import (
    BiddingHistory,
    DataConsumer,
    DataOwner,
    default_bids,
    match_first_price,
    match_random_partition,
    record_bids,
)
from .nn import clone_model, init_mlp

log = logging.getLogger(__name__)

SCENARIOS = ("unrestricted", "restricted", "fedcdc")
MECHANISMS = ("partition", "first_price")

# Salts separating the RNG streams derived from the scenario seed.
_S_BASE_DATA = 1
_S_TEST_SLICE = 3
_S_MODEL_INIT = 4
_S_MATCHING = 5
_S_TRAINING = 6
_S_DISTILL = 7
_S_ALLIANCE = 8


@dataclass
class BlobSpec:
    """Synthetic Gaussian-cluster data source."""

    dim: int = 16
    num_classes: int = 10
    per_class: int = 5000
    spread: float = 1.0
    scale: float = 1.0


@dataclass
class IdxPaths:
    """IDX file quadruple for running on a real image dataset."""

    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass
class PartitionSizes:
    n_dc: int = 3
    n_do: int = 24
    n_c: int = 4
    samples_per_do: int = 1000
    samples_per_val: int = 2000
    public_size: int = 5000


@dataclass
class ScenarioConfig:
    scenario: str = "fedcdc"
    rounds: int = 50
    matching_period: int = 5
    alliance_start: int = 10
    seed: int = 0
    samples_per_test: int = 2000
    mechanism: str = "partition"
    history_span: int = 5
    min_shared_labels: int = 2
    min_shared_owners: int = 2
    budget_share: float = 0.0
    dc_budget: float = 0.0
    hidden_dims: list[int] = field(default_factory=lambda: [64, 32])
    blobs: BlobSpec = field(default_factory=BlobSpec)
    idx: IdxPaths | None = None
    partition: PartitionSizes = field(default_factory=PartitionSizes)
    fl: FLRoundConfig = field(default_factory=FLRoundConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.matching_period < 1:
            raise ConfigError("matching_period must be >= 1")
        if self.scenario == "fedcdc" and not 0 <= self.alliance_start < self.rounds:
            raise ConfigError(
                f"alliance_start={self.alliance_start} must fall inside the {self.rounds} rounds"
            )
        if self.history_span < 1:
            raise ConfigError("history_span must be >= 1")


_SECTION_TYPES = {
    "blobs": BlobSpec,
    "partition": PartitionSizes,
    "fl": FLRoundConfig,
    "distill": DistillConfig,
    "idx": IdxPaths,
}


def config_from_dict(doc: dict) -> ScenarioConfig:
    """Build a config from a parsed JSON document, rejecting unknown keys."""
    kwargs: dict = {}
    top_fields = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key, value in doc.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTION_TYPES:
            cls = _SECTION_TYPES[key]
            known = {f.name for f in dataclasses.fields(cls)}
            extra = set(value) - known
            if extra:
                raise ConfigError(f"unknown keys {sorted(extra)} in config section {key!r}")
            kwargs[key] = cls(**value)
        else:
            kwargs[key] = value
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> ScenarioConfig:
    """Load a JSON scenario config; the literal name ``default`` is built in."""
    if path == "default":
        return ScenarioConfig()
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class RoundRow:
    round: int
    dc_id: int
    val_acc: float
    test_acc: float
    recruited: list[int]


@dataclass
class AllianceRecord:
    uid: int
    created_round: int
    participants: list[int]
    shared_labels: list[int]
    contested_owners: list[int]
    value: int
    payments: dict[int, float]
    effective_budgets: dict[int, float]
    budget: float
    synthetic_dc_id: int


@dataclass
class MetricsTrace:
    scenario: str
    seed: int
    rows: list[RoundRow]
    alliances: list[AllianceRecord]
    final_val_by_dc: dict[int, float]
    final_test_by_dc: dict[int, float]

    def final_mean_test(self) -> float:
        return float(np.mean(list(self.final_test_by_dc.values())))

    def final_mean_val(self) -> float:
        return float(np.mean(list(self.final_val_by_dc.values())))


class _Market:
    """Mutable market state for one scenario run."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        base, test_pool = _load_data(cfg)
        spec = PartitionSpec(
            n_dc=cfg.partition.n_dc,
            n_do=cfg.partition.n_do,
            n_c=cfg.partition.n_c,
            samples_per_do=cfg.partition.samples_per_do,
            samples_per_val=cfg.partition.samples_per_val,
            public_size=cfg.partition.public_size,
            seed=cfg.seed,
        )
        part = build_market_partition(spec, base)
        self.owners = [
            DataOwner(j, shard, frozenset(int(c) for c in np.unique(shard.labels)))
            for j, shard in enumerate(part.do_shards)
        ]
        self.public: UnlabeledDataset = part.public
        self.consumers: list[DataConsumer] = []
        self.test_shards: list[LabeledDataset] = []
        input_dim = base.dim
        for i, labels in enumerate(part.dc_label_sets):
            model = init_mlp(
                input_dim,
                cfg.hidden_dims,
                base.num_classes,
                labels,
                np.random.default_rng([cfg.seed, _S_MODEL_INIT, i]),
            )
            self.consumers.append(
                DataConsumer(i, labels, model, part.dc_val_shards[i], budget=cfg.dc_budget)
            )
            self.test_shards.append(
                take_class_balanced(
                    test_pool, labels, cfg.samples_per_test, [cfg.seed, _S_TEST_SLICE, i]
                )
            )
        self.history = BiddingHistory(cfg.history_span, len(self.consumers), len(self.owners))
        self.alliances: list[Alliance] = []
        self.next_uid = 0
        self.next_synth_id = len(self.consumers)

    def alliance_participants(self) -> set[int]:
        return set().union(*(a.candidate.participants for a in self.alliances)) if self.alliances else set()

    def excluded_owners(self) -> dict[int, frozenset[int]]:
        """Owners each participant abstains from (its alliances recruit them)."""
        out: dict[int, set[int]] = {}
        for a in self.alliances:
            for pid in a.candidate.participants:
                out.setdefault(pid, set()).update(a.candidate.contested)
        return {pid: frozenset(s) for pid, s in out.items()}

    def all_consumers(self) -> list[DataConsumer]:
        return self.consumers + [a.consumer for a in self.alliances]


def _load_data(cfg: ScenarioConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.idx is not None:
        base = load_idx(cfg.idx.train_images, cfg.idx.train_labels)
        test = load_idx(cfg.idx.test_images, cfg.idx.test_labels, base.num_classes)
        return base, test
    b = cfg.blobs
    # Generate train and held-out test samples in one pass so both halves
    # share the same class means.
    test_per_class = -(-cfg.samples_per_test // cfg.partition.n_c)
    full = gen_blobs(
        b.num_classes,
        b.dim,
        b.per_class + test_per_class,
        b.spread,
        [cfg.seed, _S_BASE_DATA],
        b.scale,
    )
    return split_per_class(full, b.per_class)


def run_scenario(cfg: ScenarioConfig) -> MetricsTrace:
    """Execute the configured scenario round loop; deterministic per seed."""
    market = _Market(cfg)
    rows: list[RoundRow] = []
    alliance_records: list[AllianceRecord] = []
    best_val = {c.id: -1.0 for c in market.consumers}
    best_test = {c.id: 0.0 for c in market.consumers}
    recruit: dict[int, list[int]] = {}

    for r in range(cfg.rounds):
        census_changed = False
        if (
            cfg.scenario == "fedcdc"
            and r >= cfg.alliance_start
            and (r - cfg.alliance_start) % cfg.matching_period == 0
        ):
            created, market.next_uid = create_alliances(
                market.consumers,
                market.owners,
                market.history,
                cfg.min_shared_labels,
                cfg.min_shared_owners,
                cfg.budget_share,
                cfg.hidden_dims,
                np.random.default_rng([cfg.seed, _S_ALLIANCE, r]),
                existing={a.candidate.key() for a in market.alliances},
                uid_start=market.next_uid,
                id_start=market.next_synth_id,
                created_round=r,
            )
            for a in created:
                market.alliances.append(a)
                market.next_synth_id += 1
                alliance_records.append(_record_of(a))
                for pid in sorted(a.candidate.participants):
                    dc = market.consumers[pid]
                    if dc.expert is None:
                        dc.expert = clone_model(dc.model)
                census_changed = True

        bids = default_bids(market.consumers, market.owners, market.excluded_owners())
        record_bids(market.history, r, bids)

        if r % cfg.matching_period == 0 or census_changed:
            recruit = _match(cfg, market, bids, r)

        participants = market.alliance_participants()
        for consumer in market.consumers:
            recruited = [market.owners[o] for o in recruit.get(consumer.id, [])]
            rng = np.random.default_rng([cfg.seed, _S_TRAINING, consumer.id, r])
            if consumer.id in participants:
                consumer.expert = run_fl_round(
                    consumer, recruited, cfg.fl, rng, market.public, model=consumer.expert
                )
            else:
                consumer.model = run_fl_round(consumer, recruited, cfg.fl, rng, market.public)
        for a in sorted(market.alliances, key=lambda a: a.candidate.uid):
            sc = a.consumer
            recruited = [market.owners[o] for o in recruit.get(sc.id, [])]
            rng = np.random.default_rng([cfg.seed, _S_TRAINING, sc.id, r])
            sc.model = run_fl_round(sc, recruited, cfg.fl, rng, market.public)

        if cfg.scenario == "fedcdc" and participants:
            for pid in sorted(participants):
                consumer = market.consumers[pid]
                teachers = [
                    a.consumer.model
                    for a in sorted(market.alliances, key=lambda a: a.candidate.uid)
                    if pid in a.candidate.participants
                ]
                assert consumer.expert is not None
                teachers.append(consumer.expert)
                ensemble = TeacherEnsemble(teachers, consumer.label_set)
                distill_train(
                    consumer.model,
                    ensemble,
                    market.public,
                    cfg.distill,
                    np.random.default_rng([cfg.seed, _S_DISTILL, pid, r]),
                )

        for consumer in market.consumers:
            val = evaluate(consumer.model, consumer.validation_shard, consumer.label_set)
            if val > best_val[consumer.id]:
                best_val[consumer.id] = val
                best_test[consumer.id] = evaluate(
                    consumer.model, market.test_shards[consumer.id], consumer.label_set
                )
            rows.append(
                RoundRow(r, consumer.id, val, best_test[consumer.id], recruit.get(consumer.id, []))
            )

    final_val = {c.id: best_val[c.id] for c in market.consumers}
    final_test = {c.id: best_test[c.id] for c in market.consumers}
    return MetricsTrace(cfg.scenario, cfg.seed, rows, alliance_records, final_val, final_test)


def _record_of(a: Alliance) -> AllianceRecord:
    return AllianceRecord(
        uid=a.candidate.uid,
        created_round=a.created_round,
        participants=sorted(a.candidate.participants),
        shared_labels=sorted(a.candidate.shared_labels),
        contested_owners=sorted(a.candidate.contested),
        value=candidate_value(a.candidate),
        payments=dict(sorted(a.payments.items())),
        effective_budgets=dict(sorted(a.effective_budgets.items())),
        budget=a.budget,
        synthetic_dc_id=a.consumer.id,
    )


def _match(
    cfg: ScenarioConfig, market: _Market, real_bids: np.ndarray, round_index: int
) -> dict[int, list[int]]:
    """Per-consumer recruited owner ids for this matching period."""
    if cfg.scenario == "unrestricted":
        return {
            c.id: [o.id for j, o in enumerate(market.owners) if real_bids[i, j] > 0]
            for i, c in enumerate(market.consumers)
        }

    interest: dict[int, list[int]] = {o.id: [] for o in market.owners}
    for i, c in enumerate(market.consumers):
        for j, o in enumerate(market.owners):
            if real_bids[i, j] > 0:
                interest[o.id].append(c.id)
    for a in sorted(market.alliances, key=lambda a: a.candidate.uid):
        for oid in sorted(a.candidate.contested):
            interest[oid].append(a.consumer.id)

    if cfg.mechanism == "first_price":
        consumers = market.all_consumers()
        bids = np.zeros((len(consumers), len(market.owners)))
        for row, c in enumerate(consumers):
            for j, o in enumerate(market.owners):
                if c.id in interest[o.id]:
                    bids[row, j] = 1.0
        budgets = {row: c.budget for row, c in enumerate(consumers)}
        matching = match_first_price(bids, budgets)
        assignment = {market.owners[j].id: consumers[row].id for j, row in matching.assignment.items()}
    else:
        assignment = {}
        uncontested = {oid: cids[0] for oid, cids in interest.items() if len(cids) == 1}
        assignment.update(uncontested)
        groups: dict[tuple[int, ...], list[int]] = {}
        for oid, cids in interest.items():
            if len(cids) > 1:
                groups.setdefault(tuple(sorted(cids)), []).append(oid)
        for gidx, (cids, owner_ids) in enumerate(sorted(groups.items())):
            if len(owner_ids) % len(cids) != 0:
                raise ConfigError(
                    f"{len(owner_ids)} contested owners cannot be split evenly "
                    f"over consumers {list(cids)}"
                )
            per_dc = len(owner_ids) // len(cids)
            sub = match_random_partition(
                set(owner_ids),
                list(cids),
                per_dc,
                {},
                [cfg.seed, _S_MATCHING, round_index, gidx],
            )
            assignment.update(sub.assignment)

    recruit: dict[int, list[int]] = {}
    for oid, cid in sorted(assignment.items()):
        recruit.setdefault(cid, []).append(oid)
    return recruit


def emit_metrics(trace: MetricsTrace, out_dir: str | Path) -> list[Path]:
    """Write accuracy.csv, alliances.json, summary.json; byte-stable per trace."""
    if not trace.rows:
        raise ValueError("empty trace")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    acc_path = out / "accuracy.csv"
    mean_by_round: dict[int, float] = {}
    for r in sorted({row.round for row in trace.rows}):
        vals = [row.val_acc for row in trace.rows if row.round == r]
        mean_by_round[r] = float(np.mean(vals))
    with acc_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "dc_id", "val_acc", "test_acc", "mean_acc"])
        for row in sorted(trace.rows, key=lambda x: (x.round, x.dc_id)):
            writer.writerow(
                [
                    row.round,
                    row.dc_id,
                    f"{row.val_acc:.6f}",
                    f"{row.test_acc:.6f}",
                    f"{mean_by_round[row.round]:.6f}",
                ]
            )

    alliances_path = out / "alliances.json"
    alliance_docs = [
        {
            "uid": rec.uid,
            "created_round": rec.created_round,
            "participants": rec.participants,
            "shared_labels": rec.shared_labels,
            "contested_owners": rec.contested_owners,
            "value": rec.value,
            "payments": {str(k): v for k, v in rec.payments.items()},
            "effective_budgets": {str(k): v for k, v in rec.effective_budgets.items()},
            "budget": rec.budget,
            "synthetic_dc_id": rec.synthetic_dc_id,
        }
        for rec in sorted(trace.alliances, key=lambda rec: rec.uid)
    ]
    alliances_path.write_text(
        json.dumps(alliance_docs, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    summary_path = out / "summary.json"
    summary = {
        "scenario": trace.scenario,
        "seed": trace.seed,
        "rounds": len(mean_by_round),
        "final_mean_val_acc": trace.final_mean_val(),
        "final_mean_test_acc": trace.final_mean_test(),
        "per_dc": {
            str(dc): {
                "val_acc": trace.final_val_by_dc[dc],
                "test_acc": trace.final_test_by_dc[dc],
            }
            for dc in sorted(trace.final_val_by_dc)
        },
        "n_alliances": len(trace.alliances),
    }
    summary_path.write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return [acc_path, alliances_path, summary_path]


def recovered_gap_ratio(
    unrestricted: float, restricted: float, fedcdc: float
) -> float | None:
    """Fraction of the restriction penalty won back; None when the gap is zero."""
    gap = unrestricted - restricted
    if gap == 0:
        return None
    return (fedcdc - restricted) / gap


def compare_scenarios(cfg_base: ScenarioConfig) -> dict:
    """Run all three scenarios on a shared seed/partition and report the gap recovery."""
    finals: dict[str, float] = {}
    for scenario in SCENARIOS:
        cfg = dataclasses.replace(cfg_base, scenario=scenario)
        trace = run_scenario(cfg)
        finals[scenario] = trace.final_mean_test()
    ratio = recovered_gap_ratio(finals["unrestricted"], finals["restricted"], finals["fedcdc"])
    return {
        "seed": cfg_base.seed,
        "final_mean_test_acc": finals,
        "restriction_gap": finals["unrestricted"] - finals["restricted"],
        "recovered_gap_ratio": ratio if ratio is not None else "undefined (zero gap)",
    }
