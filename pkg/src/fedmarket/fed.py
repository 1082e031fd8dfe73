"""Federated training rounds: local training, FedAvg/FedDF aggregation, evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, UnlabeledDataset
from .distill import (
    _distill_epochs,
    combine_teacher_rows,
    distill_loss_rows,
    uniform_weight_rows,
    _teacher_slices,
    _softmax_dense,
)
from .market import DataConsumer, DataOwner
from .nn import Mlp, clone_model, forward, init_adam, train_step

log = logging.getLogger(__name__)

# FedDF distills on the soft loss only (uniform teacher averaging).
FEDDF_ALPHA = 1.0


@dataclass
class FLRoundConfig:
    local_epochs: int = 5
    distill_epochs: int = 5
    batch_size: int = 32
    method: str = "fedavg"
    lr: float = 0.001

    def __post_init__(self) -> None:
        if self.local_epochs < 1 or self.distill_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.method not in ("fedavg", "feddf"):
            raise ValueError(f"unknown aggregation method {self.method!r}")


def fedavg_aggregate(local_models: list[tuple[Mlp, int]]) -> Mlp:
    """Shard-size-weighted parameter mean of architecture-identical models."""
    if not local_models:
        raise ValueError("nothing to aggregate")
    first = local_models[0][0]
    for m, _ in local_models[1:]:
        if m.dims != first.dims or m.active_labels != first.active_labels:
            raise ValueError("local models differ in architecture or active labels")
    total = float(sum(size for _, size in local_models))
    if total <= 0:
        raise ValueError("shard sizes must sum to a positive number")
    out = clone_model(first)
    for i in range(len(out.weights)):
        out.weights[i] = sum((size / total) * m.weights[i] for m, size in local_models)
    for i in range(len(out.biases)):
        out.biases[i] = sum((size / total) * m.biases[i] for m, size in local_models)
    return out


def local_train(
    model: Mlp,
    shard: LabeledDataset,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> Mlp:
    """Train a fresh copy of ``model`` on one owner's shard."""
    local = clone_model(model)
    opt = init_adam(local.parameters(), lr=lr)
    n = len(shard)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            train_step(local, opt, shard.features[sel], shard.labels[sel])
    return local


def feddf_round(
    global_model: Mlp,
    local_models: list[tuple[Mlp, int]],
    public: UnlabeledDataset,
    cfg: FLRoundConfig,
    rng: np.random.Generator,
) -> Mlp:
    """FedDF aggregation: FedAvg init, then distill on uniform-average teacher logits."""
    if not local_models:
        raise ValueError("feddf needs at least one local model")
    if len(public) == 0:
        raise ValueError("feddf needs a nonempty public set")
    student = fedavg_aggregate(local_models)
    if student.dims != global_model.dims:
        raise ValueError("local models do not match the global architecture")
    teachers = [m for m, _ in local_models]
    _distill_epochs(
        student,
        teachers,
        uniform_weight_rows,
        public,
        FEDDF_ALPHA,
        cfg.distill_epochs,
        cfg.batch_size,
        cfg.lr,
        rng,
    )
    return student


def mean_distill_loss(
    student: Mlp, teachers: list[Mlp], public: UnlabeledDataset, alpha: float
) -> float:
    """Mean uniform-ensemble distillation loss over the public pool."""
    target_index = student.active_index
    contrib = _teacher_slices(teachers, target_index)
    x = public.features
    t_logits = [forward(t, x) for t in teachers]
    w = uniform_weight_rows(t_logits, contrib, target_index)
    z_t = combine_teacher_rows(t_logits, w, contrib, target_index)
    p_t = _softmax_dense(z_t)
    losses = distill_loss_rows(forward(student, x)[:, target_index], p_t, alpha)
    return float(losses.mean())


def run_fl_round(
    consumer: DataConsumer,
    owners: list[DataOwner],
    cfg: FLRoundConfig,
    rng: np.random.Generator,
    public: UnlabeledDataset | None = None,
    model: Mlp | None = None,
) -> Mlp:
    """One FL round: broadcast, local training per owner, aggregate.

    Trains ``model`` (default: the consumer's global model). An empty owner
    list is a starvation event: logged, model returned unchanged.
    """
    start = model if model is not None else consumer.model
    if not owners:
        log.warning("consumer %d recruited no owners this round (starved)", consumer.id)
        return start
    ordered = sorted(owners, key=lambda o: o.id)
    child_rngs = rng.spawn(len(ordered))
    trained: list[tuple[Mlp, int]] = []
    for owner, orng in zip(ordered, child_rngs):
        local = local_train(
            start, owner.train_shard, cfg.local_epochs, cfg.batch_size, cfg.lr, orng
        )
        trained.append((local, len(owner.train_shard)))
    if cfg.method == "feddf":
        if public is None:
            raise ValueError("feddf aggregation needs the public set")
        return feddf_round(start, trained, public, cfg, rng)
    return fedavg_aggregate(trained)


def evaluate(
    model: Mlp, shard: LabeledDataset, restrict_to: frozenset[int] | set[int]
) -> float:
    """Accuracy of argmax over ``restrict_to`` positions; ties pick the lowest class."""
    if len(shard) == 0:
        raise ValueError("cannot evaluate on an empty shard")
    if not set(restrict_to) <= set(model.active_labels):
        raise ValueError("restrict_to must be a subset of the model's active labels")
    cols = np.array(sorted(restrict_to), dtype=np.intp)
    logits = forward(model, shard.features)
    pred = cols[np.argmax(logits[:, cols], axis=1)]
    return float((pred == shard.labels).mean())
