import numpy as np
import pytest

from fedmarket.data import LabeledDataset, gen_blobs
from fedmarket.distill import DistillConfig
from fedmarket.fed import FLRoundConfig
from fedmarket.market import BiddingHistory, DataConsumer, DataOwner, default_bids, record_bids
from fedmarket.nn import cross_entropy_grad, init_mlp, _backward, _forward_cached
from fedmarket.sim import BlobSpec, PartitionSizes, ScenarioConfig


def tiny_cfg(scenario="restricted", **overrides):
    """A seconds-scale scenario config on the standard 3-DC / 24-DO layout."""
    base = dict(
        scenario=scenario,
        rounds=6,
        matching_period=2,
        alliance_start=2,
        history_span=2,  # aged out by the next creation pass, like the default geometry
        seed=5,
        samples_per_test=80,
        blobs=BlobSpec(dim=8, num_classes=10, per_class=250, spread=1.0),
        partition=PartitionSizes(
            n_dc=3, n_do=24, n_c=4, samples_per_do=60, samples_per_val=40, public_size=200
        ),
        fl=FLRoundConfig(local_epochs=2, batch_size=32),
        distill=DistillConfig(alpha=1.0, epochs=2, batch_size=32),
    )
    base.update(overrides)
    return ScenarioConfig(**base)


@pytest.fixture
def tiny_config_factory():
    return tiny_cfg


SHARED_LABELS = frozenset({0, 1})
UNIQUE_LABELS = [frozenset({2, 3}), frozenset({4, 5}), frozenset({6, 7})]


def label_shard(base, labels):
    keep = np.isin(base.labels, sorted(labels))
    return LabeledDataset(base.features[keep], base.labels[keep], base.num_classes)


def paper_market(n_shared_owners=6, budget=0.0, num_classes=10):
    """Three consumers sharing two labels; shared owners contested by all.

    Mirrors the experimental construction: one owner group holds only the
    shared classes, one group per consumer holds only its unique classes.
    """
    base = gen_blobs(num_classes, 4, 80, 0.5, 0)
    consumers = []
    for i in range(3):
        labels = SHARED_LABELS | UNIQUE_LABELS[i]
        model = init_mlp(4, [6], num_classes, labels, np.random.default_rng(i))
        consumers.append(
            DataConsumer(i, labels, model, label_shard(base, labels), budget=budget)
        )
    owners = [
        DataOwner(j, label_shard(base, SHARED_LABELS), SHARED_LABELS)
        for j in range(n_shared_owners)
    ]
    for i in range(3):
        for j in range(2):
            oid = n_shared_owners + i * 2 + j
            owners.append(DataOwner(oid, label_shard(base, UNIQUE_LABELS[i]), UNIQUE_LABELS[i]))
    history = BiddingHistory(5, 3, len(owners))
    for r in range(5):
        record_bids(history, r, default_bids(consumers, owners))
    return consumers, owners, history


def _loss_of(model, x, y):
    logits, _ = _forward_cached(model, x)
    loss, _ = cross_entropy_grad(model, logits, y)
    return loss


def max_grad_rel_error(model, x, y, h=1e-4):
    """Worst elementwise relative error, analytic vs central finite differences."""
    logits, acts = _forward_cached(model, x)
    _, dlogits = cross_entropy_grad(model, logits, y)
    grads = _backward(model, acts, dlogits)
    worst = 0.0
    for p, g in zip(model.parameters(), grads):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            lp = _loss_of(model, x, y)
            p[idx] = orig - h
            lm = _loss_of(model, x, y)
            p[idx] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6)
            worst = max(worst, rel)
    return worst
