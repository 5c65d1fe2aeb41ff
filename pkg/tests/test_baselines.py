from dataclasses import replace

import numpy as np
import pytest

from mlmule.baselines import (
    METHODS,
    CentralServer,
    encounter_steps,
    fedavg_round,
    gossip_encounter,
    local_only_step,
    oppcl_encounter,
)
from mlmule.learner import (
    Architecture,
    Hyperparams,
    ModelParams,
    ModelSnapshot,
    aggregate_weighted,
    evaluate,
    init_model,
    train,
)
from mlmule.partition import LabeledDataset, SynthSpec, synth_dataset, train_test_split
from mlmule.protocol import MuleState

HYPER = Hyperparams(learning_rate=0.1, batch_size=16, epochs=1)
ARCH = Architecture("logistic", 4, 4)


def _params(seed):
    return init_model(ARCH, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def data():
    ds = synth_dataset(SynthSpec(n_superclasses=2, n_subclasses=2, samples_per_subclass=40, n_features=4,
                                 sigma=0.3), np.random.default_rng(0))
    return train_test_split(ds, 0.25, np.random.default_rng(1))


def test_method_names():
    assert set(METHODS) >= {"mlmule", "fedavg", "gossip", "oppcl", "local"}


def test_fedavg_examples():
    server = CentralServer(ModelSnapshot(_params(0)))
    one = ModelSnapshot(_params(1), 3, 40)
    assert fedavg_round(server, [one]).global_snapshot.params == one.params
    same = fedavg_round(server, [one, one, one]).global_snapshot
    assert same.params == one.params
    a = ModelSnapshot(ModelParams(np.zeros(ARCH.n_params), ARCH.shape_tag), 0, 10)
    b = ModelSnapshot(ModelParams(np.full(ARCH.n_params, 2.0), ARCH.shape_tag), 0, 10)
    out = fedavg_round(server, [a, b], now=4)
    assert np.allclose(out.global_snapshot.params.values, 1.0)
    assert out.round_counter == 1 and out.global_snapshot.n_train_samples == 20
    assert fedavg_round(server, []) is server


def test_fedavg_single_client_equals_local_training(data):
    train_ds, _ = data
    m = MuleState(0, ModelSnapshot(_params(2), 0, len(train_ds)), local_train=train_ds)
    local, fed = m, m
    server = CentralServer(ModelSnapshot(_params(2)))
    for t in range(1, 6):
        local = local_only_step(local, HYPER, np.random.default_rng(t), t)
        fed = local_only_step(fed, HYPER, np.random.default_rng(t), t)
        server = fedavg_round(server, [fed.snapshot], t)
        fed = replace(fed, snapshot=server.global_snapshot)
        assert fed.snapshot.params == local.snapshot.params


def test_local_only_matches_plain_training(data):
    train_ds, _ = data
    m = MuleState(0, ModelSnapshot(_params(3)), local_train=train_ds)
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    p = m.snapshot.params
    for t in range(4):
        m = local_only_step(m, HYPER, rng_a, t)
        p = train(p, train_ds, HYPER, rng_b)
    assert m.snapshot.params == p and m.snapshot.last_update == 3


def test_gossip_identical_and_dataless_is_a_no_op():
    p = _params(4)
    a, b = MuleState(0, ModelSnapshot(p, 1, 5)), MuleState(1, ModelSnapshot(p, 1, 5))
    a2, b2 = gossip_encounter(a, b, HYPER, np.random.default_rng(0), np.random.default_rng(1))
    assert a2.snapshot.params == p and b2.snapshot.params == p


def test_gossip_is_symmetric(data):
    train_ds, _ = data
    a = MuleState(0, ModelSnapshot(_params(5), 0, 10), local_train=train_ds)
    b = MuleState(1, ModelSnapshot(_params(6), 0, 10), local_train=train_ds.subset(np.arange(20)))
    a2, b2 = gossip_encounter(a, b, HYPER, np.random.default_rng(7), np.random.default_rng(8))
    b3, a3 = gossip_encounter(b, a, HYPER, np.random.default_rng(8), np.random.default_rng(7))
    assert a2.snapshot.params == a3.snapshot.params and b2.snapshot.params == b3.snapshot.params


def test_gossip_parties_share_the_aggregate_before_training():
    a = MuleState(0, ModelSnapshot(_params(5), 0, 10))
    b = MuleState(1, ModelSnapshot(_params(6), 0, 10))
    a2, b2 = gossip_encounter(a, b, HYPER, np.random.default_rng(0), np.random.default_rng(1))
    assert a2.snapshot.params == b2.snapshot.params
    assert np.allclose(a2.snapshot.params.values, (a.snapshot.params.values + b.snapshot.params.values) / 2)


def test_oppcl_with_dataless_peer(data):
    train_ds, _ = data
    a = MuleState(0, ModelSnapshot(_params(5), 0, 10), local_train=train_ds)
    outs = []
    for seed in (1, 2):
        b = MuleState(1, ModelSnapshot(_params(10 + seed), 0, 10),
                      local_train=LabeledDataset.empty(4, 4))
        a2, _ = oppcl_encounter(a, b, HYPER, np.random.default_rng(0), np.random.default_rng(0))
        outs.append(a2.snapshot.params)
    # b returns a's copy untouched, so a averages its model with itself
    assert outs[0] == outs[1] == a.snapshot.params


def test_oppcl_owner_aggregates_the_returned_copy(data):
    train_ds, _ = data
    a = MuleState(0, ModelSnapshot(_params(5), 0, 10))
    b = MuleState(1, ModelSnapshot(_params(6), 0, 10), local_train=train_ds)
    a2, b2 = oppcl_encounter(a, b, HYPER, np.random.default_rng(3), np.random.default_rng(4))
    trained_copy = train(a.snapshot.params, train_ds, HYPER, np.random.default_rng(4))
    expected = aggregate_weighted([a.snapshot, ModelSnapshot(trained_copy, 0, len(train_ds))])
    assert a2.snapshot.params == expected
    # a has no data, so b's copy comes back unchanged
    assert b2.snapshot.params == b.snapshot.params


def test_one_oppcl_encounter_keeps_own_accuracy(data):
    train_ds, test_ds = data
    half = len(train_ds) // 2
    mine, theirs = train_ds.subset(np.arange(half)), train_ds.subset(np.arange(half, len(train_ds)))
    deltas = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pa = train(_params(seed), mine, replace(HYPER, epochs=5), rng)
        pb = train(_params(seed + 100), theirs, replace(HYPER, epochs=5), rng)
        a = MuleState(0, ModelSnapshot(pa, 0, len(mine)), local_train=mine)
        b = MuleState(1, ModelSnapshot(pb, 0, len(theirs)), local_train=theirs)
        a2, _ = oppcl_encounter(a, b, HYPER, np.random.default_rng(seed), np.random.default_rng(seed + 1))
        deltas.append(evaluate(a2.snapshot.params, test_ds).accuracy - evaluate(pa, test_ds).accuracy)
    assert np.mean(deltas) >= -0.05


def test_encounter_durations():
    assert encounter_steps("gossip", 3) == 6
    assert encounter_steps("oppcl", 3) == 12
