import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmarket.data import LabeledDataset, UnlabeledDataset, gen_blobs, split_per_class
from fedmarket.fed import (
    FLRoundConfig,
    evaluate,
    fedavg_aggregate,
    feddf_round,
    local_train,
    mean_distill_loss,
    run_fl_round,
)
from fedmarket.market import DataConsumer, DataOwner
from fedmarket.nn import Mlp, clone_model, init_mlp


def model_with(seed, dims=(4, 6, 3), active=None):
    active = active if active is not None else set(range(dims[-1]))
    return init_mlp(dims[0], list(dims[1:-1]), dims[-1], active, np.random.default_rng(seed))


# ---------------------------------------------------------------- fedavg

def test_fedavg_equal_sizes_is_mean():
    a, b = model_with(0), model_with(1)
    out = fedavg_aggregate([(a, 100), (b, 100)])
    for pa, pb, po in zip(a.parameters(), b.parameters(), out.parameters()):
        assert np.abs(po - (pa + pb) / 2).max() < 1e-12


def test_fedavg_single_model_identity():
    a = model_with(2)
    out = fedavg_aggregate([(a, 10)])
    for pa, po in zip(a.parameters(), out.parameters()):
        assert np.array_equal(pa, po)


def test_fedavg_shard_weighted_blend():
    a, b = model_with(3), model_with(4)
    out = fedavg_aggregate([(a, 1000), (b, 3000)])
    for pa, pb, po in zip(a.parameters(), b.parameters(), out.parameters()):
        assert np.abs(po - (0.25 * pa + 0.75 * pb)).max() < 1e-12


def test_fedavg_weights_match_rational_arithmetic():
    # integer parameters make the float blend exactly representable
    def int_model(fill):
        m = model_with(0)
        for p in m.parameters():
            p[:] = fill
        return m

    a, b = int_model(1.0), int_model(5.0)
    out = fedavg_aggregate([(a, 1), (b, 3)])
    expected = Fraction(1, 4) * 1 + Fraction(3, 4) * 5
    assert float(expected) == out.weights[0][0, 0]


def test_fedavg_identical_models_unchanged():
    a = model_with(5)
    out = fedavg_aggregate([(a, 7), (clone_model(a), 13), (clone_model(a), 1)])
    for pa, po in zip(a.parameters(), out.parameters()):
        assert np.abs(po - pa).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(1, 10_000), min_size=1, max_size=4))
def test_fedavg_is_convex_combination(sizes):
    models = [model_with(i) for i in range(len(sizes))]
    out = fedavg_aggregate(list(zip(models, sizes)))
    total = sum(sizes)
    for idx, po in enumerate(out.parameters()):
        expected = sum((s / total) * m.parameters()[idx] for m, s in zip(models, sizes))
        assert np.abs(po - expected).max() < 1e-12


def test_fedavg_architecture_mismatch_rejected():
    a = model_with(0, dims=(4, 6, 3))
    b = model_with(0, dims=(4, 5, 3))
    with pytest.raises(ValueError):
        fedavg_aggregate([(a, 1), (b, 1)])
    c = model_with(0, dims=(4, 6, 3), active={0, 1})
    with pytest.raises(ValueError):
        fedavg_aggregate([(a, 1), (c, 1)])


# ---------------------------------------------------------------- owners and rounds

def _owner(oid, ds):
    labels = frozenset(int(c) for c in np.unique(ds.labels))
    return DataOwner(oid, ds, labels)


def _split_owners(ds, n):
    per = len(ds) // n
    out = []
    for i in range(n):
        sl = slice(i * per, (i + 1) * per)
        out.append(
            _owner(i, LabeledDataset(ds.features[sl], ds.labels[sl], ds.num_classes))
        )
    return out


def _consumer(model, val):
    return DataConsumer(0, model.active_labels, model, val)


def test_single_owner_round_equals_local_training():
    ds = gen_blobs(3, 4, 60, 1.0, 0)
    owner = _owner(0, ds)
    model = model_with(1)
    consumer = _consumer(model, ds)
    cfg = FLRoundConfig(local_epochs=2, batch_size=16)
    out = run_fl_round(consumer, [owner], cfg, np.random.default_rng(42))
    manual = local_train(
        model, ds, 2, 16, cfg.lr, np.random.default_rng(42).spawn(1)[0]
    )
    for a, b in zip(out.parameters(), manual.parameters()):
        assert np.array_equal(a, b)


def test_empty_owner_set_starves(caplog):
    ds = gen_blobs(3, 4, 30, 1.0, 1)
    model = model_with(2)
    consumer = _consumer(model, ds)
    before = [p.copy() for p in model.parameters()]
    with caplog.at_level(logging.WARNING):
        out = run_fl_round(consumer, [], FLRoundConfig(), np.random.default_rng(0))
    assert out is model
    for b, a in zip(before, out.parameters()):
        assert np.array_equal(b, a)
    assert any("starved" in rec.message for rec in caplog.records)


def test_round_is_bit_reproducible():
    ds = gen_blobs(3, 4, 90, 1.0, 3)
    owners = _split_owners(ds, 3)

    def run():
        consumer = _consumer(model_with(4), ds)
        cfg = FLRoundConfig(local_epochs=1, batch_size=16)
        return run_fl_round(consumer, owners, cfg, np.random.default_rng(7))

    a, b = run(), run()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa, pb)


def test_iid_split_matches_pooled_training():
    full = gen_blobs(3, 6, 400, 1.0, 6)
    train, val = split_per_class(full, 320)
    perm = np.random.default_rng(100).permutation(len(train))
    train = LabeledDataset(train.features[perm], train.labels[perm], train.num_classes)
    owners6 = _split_owners(train, 6)
    pooled = [_owner(0, train)]
    cfg = FLRoundConfig(local_epochs=5, batch_size=32)

    def run(owner_set, rounds):
        consumer = _consumer(model_with(8, dims=(6, 8, 3)), val)
        for r in range(rounds):
            consumer.model = run_fl_round(
                consumer, owner_set, cfg, np.random.default_rng([9, r])
            )
        return evaluate(consumer.model, val, consumer.label_set)

    acc6 = run(owners6, 10)
    acc1 = run(pooled, 10)
    assert abs(acc6 - acc1) <= 0.05


# ---------------------------------------------------------------- feddf

def test_feddf_self_distillation_starts_at_zero_loss():
    ds = gen_blobs(3, 4, 60, 1.0, 10)
    pub = UnlabeledDataset(ds.features)
    model = model_with(11)
    loss = mean_distill_loss(model, [clone_model(model)], pub, alpha=1.0)
    assert loss == pytest.approx(0.0, abs=1e-9)


def test_feddf_duplicate_teachers_match_single():
    ds = gen_blobs(3, 4, 60, 1.0, 12)
    pub = UnlabeledDataset(ds.features)
    g = model_with(13)
    local = local_train(g, ds, 1, 16, 0.001, np.random.default_rng(14))
    cfg = FLRoundConfig(local_epochs=1, distill_epochs=2, batch_size=16)
    one = feddf_round(g, [(local, 10)], pub, cfg, np.random.default_rng(15))
    two = feddf_round(g, [(local, 10), (clone_model(local), 10)], pub, cfg,
                      np.random.default_rng(15))
    for a, b in zip(one.parameters(), two.parameters()):
        assert np.allclose(a, b, atol=1e-12)


def test_feddf_distillation_reduces_loss():
    full = gen_blobs(3, 6, 200, 1.0, 16)
    train, pub_l = split_per_class(full, 150)
    pub = UnlabeledDataset(pub_l.features)
    g = model_with(17, dims=(6, 8, 3))
    # one class per owner: the drifted locals' average differs from their ensemble
    owners = _split_owners(train, 3)
    locals_ = [
        (local_train(g, o.train_shard, 10, 32, 0.005, np.random.default_rng(18 + i)), len(o.train_shard))
        for i, o in enumerate(owners)
    ]
    student0 = fedavg_aggregate(locals_)
    before = mean_distill_loss(student0, [m for m, _ in locals_], pub, alpha=1.0)
    cfg = FLRoundConfig(local_epochs=1, distill_epochs=5, batch_size=32)
    student = feddf_round(g, locals_, pub, cfg, np.random.default_rng(19))
    after = mean_distill_loss(student, [m for m, _ in locals_], pub, alpha=1.0)
    assert before > 0.01
    assert after < before


def test_feddf_requires_public_set():
    ds = gen_blobs(3, 4, 30, 1.0, 20)
    consumer = _consumer(model_with(21), ds)
    cfg = FLRoundConfig(method="feddf")
    with pytest.raises(ValueError):
        run_fl_round(consumer, [_owner(0, ds)], cfg, np.random.default_rng(0))


# ---------------------------------------------------------------- evaluate

def _perfect_model(means, scale=1.0):
    # one linear layer whose logits are inner products with the class means
    k, d = means.shape
    weights = [means.T * scale]
    biases = [np.zeros(k)]
    return Mlp([d, k], weights, biases, frozenset(range(k)))


def test_evaluate_perfect_model_scores_one():
    ds = gen_blobs(4, 6, 50, 0.0, 22)  # spread 0: samples sit exactly on the means
    means = np.stack([ds.features[ds.labels == c][0] for c in range(4)])
    model = _perfect_model(means)
    assert evaluate(model, ds, {0, 1, 2, 3}) == 1.0


def test_evaluate_random_model_near_chance():
    rng = np.random.default_rng(23)
    feats = rng.normal(size=(2000, 8))
    labels = np.tile(np.arange(4), 500)
    ds = LabeledDataset(feats, labels, 4)
    model = init_mlp(8, [16], 4, {0, 1, 2, 3}, np.random.default_rng(24))
    acc = evaluate(model, ds, {0, 1, 2, 3})
    assert abs(acc - 0.25) <= 0.05


def test_evaluate_restricted_argmax():
    ds = gen_blobs(4, 6, 20, 0.0, 25)
    means = np.stack([ds.features[ds.labels == c][0] for c in range(4)])
    model = _perfect_model(means)
    sub = LabeledDataset(
        ds.features[ds.labels < 2], ds.labels[ds.labels < 2], 4
    )
    assert evaluate(model, sub, {0, 1}) == 1.0


def test_evaluate_invariant_to_positive_rescaling():
    ds = gen_blobs(3, 4, 40, 1.0, 26)
    model = model_with(27)
    base = evaluate(model, ds, {0, 1, 2})
    scaled = clone_model(model)
    scaled.weights[-1] *= 3.0
    scaled.biases[-1] *= 3.0
    assert evaluate(scaled, ds, {0, 1, 2}) == base


def test_evaluate_validates_inputs():
    ds = gen_blobs(3, 4, 10, 1.0, 28)
    model = model_with(29, active={0, 1})
    with pytest.raises(ValueError):
        evaluate(model, ds, {0, 2})
    empty = LabeledDataset(np.zeros((0, 4)), np.zeros(0, dtype=int), 3)
    with pytest.raises(ValueError):
        evaluate(model, empty, {0, 1})


def test_config_validation():
    with pytest.raises(ValueError):
        FLRoundConfig(local_epochs=0)
    with pytest.raises(ValueError):
        FLRoundConfig(method="fedsgd")
