"""Comparison methods: FedAvg server, Gossip learning, OppCL and Local Only."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .learner import Hyperparams, ModelSnapshot, aggregate_weighted, merge_snapshots, train
from .protocol import MuleState

METHODS = ("mlmule", "mlmule+gossip", "fedavg", "gossip", "oppcl", "local")


@dataclass(frozen=True)
class CentralServer:
    global_snapshot: ModelSnapshot
    round_counter: int = 0


def fedavg_round(server: CentralServer, clients: Sequence[ModelSnapshot], now: int = 0) -> CentralServer:
    """Aggregate the (already locally trained) clients into the new global model.

    Callers broadcast ``server.global_snapshot`` back to every client; the
    whole exchange fits inside one time step.
    """
    if not clients:
        return server
    params = aggregate_weighted(list(clients))
    n = sum(c.n_train_samples for c in clients)
    snap = ModelSnapshot(params, max(now, max(c.last_update for c in clients)), n)
    return CentralServer(snap, server.round_counter + 1)


def _train_own(state, snap: ModelSnapshot, hyper, rng, now) -> ModelSnapshot:
    ds = state.local_train
    if ds is None or len(ds) == 0:
        return snap
    return ModelSnapshot(train(snap.params, ds, hyper, rng), now, len(ds))


def gossip_encounter(a: MuleState, b: MuleState, hyper: Hyperparams, rng_a, rng_b, now: int = 0):
    """Exchange, aggregate pairwise, then each side trains on its own data."""
    merged_a = merge_snapshots(a.snapshot, b.snapshot)
    merged_b = merge_snapshots(b.snapshot, a.snapshot)
    a2 = replace(a, snapshot=_train_own(a, merged_a, hyper, rng_a, now))
    b2 = replace(b, snapshot=_train_own(b, merged_b, hyper, rng_b, now))
    return a2, b2


def oppcl_encounter(a: MuleState, b: MuleState, hyper: Hyperparams, rng_a, rng_b, now: int = 0):
    """Each side trains the peer's copy on its own data and hands it back;
    the owner then aggregates its model with the returned copy.

    ``rng_a`` drives training done by ``a`` (on the copy of ``b``'s model)
    and ``rng_b`` the converse.
    """
    a_copy_trained_by_b = _train_own(b, a.snapshot, hyper, rng_b, now)
    b_copy_trained_by_a = _train_own(a, b.snapshot, hyper, rng_a, now)
    a2 = replace(a, snapshot=merge_snapshots(a.snapshot, a_copy_trained_by_b))
    b2 = replace(b, snapshot=merge_snapshots(b.snapshot, b_copy_trained_by_a))
    return a2, b2


def local_only_step(m, hyper: Hyperparams, rng, now: int = 0):
    """One epoch on the device's own data; works for mules and fixed devices alike."""
    return replace(m, snapshot=_train_own(m, m.snapshot, hyper, rng, now))


def encounter_steps(method: str, transfer_steps: int) -> int:
    """Link ticks for one device-to-device encounter.

    One-way transfers are serialised: Gossip needs two, OppCL four.
    """
    return (4 if method == "oppcl" else 2) * transfer_steps
