"""The mule protocol: freshness filtering, in-house training cycles, mule phase.

Cycle functions are atomic: the engine holds a link open for the whole
cycle duration and only calls them once every transfer of the cycle has
completed, so an interrupted co-location leaves both ends untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ContractError
from .learner import Hyperparams, ModelSnapshot, merge_snapshots, train
from .partition import LabeledDataset

FIXED_TRAINING = "fixed_training"
MOBILE_TRAINING = "mobile_training"
MODES = (FIXED_TRAINING, MOBILE_TRAINING)
MULE_PHASE = None  # MuleState.phase value outside any space


@dataclass(frozen=True)
class ProtocolParams:
    fresh_alpha: float = 0.5
    fresh_beta: float = 1.0
    window: int = 20
    transfer_steps: int = 3
    train_steps: int = 1
    delay_d: int = 0

    def cycle_steps(self, mode: str) -> int:
        """Ticks a co-location must last for one full in-house cycle."""
        if mode == FIXED_TRAINING:
            return 2 * self.transfer_steps + self.train_steps
        return 2 * self.transfer_steps


@dataclass(frozen=True)
class FixedDeviceState:
    id: int
    snapshot: ModelSnapshot
    threshold: float = 0.0
    update_times: tuple = ()
    local_train: Optional[LabeledDataset] = None
    local_test: Optional[LabeledDataset] = None


@dataclass(frozen=True)
class MuleState:
    id: int
    snapshot: ModelSnapshot
    local_train: Optional[LabeledDataset] = None
    local_test: Optional[LabeledDataset] = None
    phase: Optional[int] = MULE_PHASE  # fixed device id while in house
    cycle_timer: int = 0
    home_space: Optional[int] = None


@dataclass(frozen=True)
class CycleReport:
    t: int
    mule: int
    fixed: int
    mode: str
    accepted: bool
    threshold_before: float
    threshold_after: float


@dataclass(frozen=True)
class CycleProgress:
    """An open link between one mule and one fixed device."""

    started: int
    remaining: int


def update_freshness_threshold(t_prev: float, update_times, alpha: float, beta: float) -> float:
    """Exponential blend of the previous threshold with median + beta * MAD of update times."""
    if len(update_times) == 0:
        raise ContractError("update time list is empty")
    times = np.asarray(update_times, dtype=float)
    med = float(np.median(times))
    mad = float(np.median(np.abs(times - med)))
    return (1.0 - alpha) * t_prev + alpha * (med + beta * mad)


def freshness_accept(snapshot: ModelSnapshot, threshold: float) -> bool:
    return snapshot.last_update >= threshold


def _receive(f: FixedDeviceState, received: ModelSnapshot, params: ProtocolParams):
    """Steps 2-3 at the fixed device: filter, then aggregate on acceptance."""
    accepted = freshness_accept(received, f.threshold)
    if not accepted:
        return f, False
    times = (f.update_times + (received.last_update,))[-params.window:]
    threshold = update_freshness_threshold(f.threshold, times, params.fresh_alpha, params.fresh_beta)
    merged = merge_snapshots(f.snapshot, received)
    return replace(f, snapshot=merged, threshold=threshold, update_times=times), True


def _train_snapshot(snap: ModelSnapshot, ds, hyper, rng, stamp) -> ModelSnapshot:
    if ds is None or len(ds) == 0:
        return snap
    return ModelSnapshot(train(snap.params, ds, hyper, rng), stamp, len(ds))


def fixed_training_cycle(m: MuleState, f: FixedDeviceState, now: int, hyper: Hyperparams, rng,
                         params: ProtocolParams = ProtocolParams(), trained_at=None):
    """Share, filter/aggregate and train at ``f``, share back, aggregate at ``m``.

    A rejected model skips only the aggregation; ``f`` still trains and replies.
    ``trained_at`` stamps the new model of ``f`` (defaults to ``now``).
    """
    before = f.threshold
    f2, accepted = _receive(f, m.snapshot, params)
    stamp = now if trained_at is None else trained_at
    f2 = replace(f2, snapshot=_train_snapshot(f2.snapshot, f.local_train, hyper, rng, stamp))
    m2 = replace(m, snapshot=merge_snapshots(m.snapshot, f2.snapshot), phase=f.id)
    return m2, f2, CycleReport(now, m.id, f.id, FIXED_TRAINING, accepted, before, f2.threshold)


def mobile_training_cycle(m: MuleState, f: FixedDeviceState, now: int, hyper: Hyperparams, rng,
                          params: ProtocolParams = ProtocolParams()):
    """Share, filter/aggregate at ``f`` (no training there), share back, aggregate and train at ``m``."""
    before = f.threshold
    f2, accepted = _receive(f, m.snapshot, params)
    merged = merge_snapshots(m.snapshot, f2.snapshot)
    m2 = replace(m, snapshot=_train_snapshot(merged, m.local_train, hyper, rng, now), phase=f.id)
    return m2, f2, CycleReport(now, m.id, f.id, MOBILE_TRAINING, accepted, before, f2.threshold)


def in_house_tick(m: MuleState, f: FixedDeviceState, now: int, link: CycleProgress | None, *,
                  mode: str, hyper: Hyperparams, rng, params: ProtocolParams = ProtocolParams(),
                  can_start: bool = True):
    """One tick of a co-located (mule, fixed device) pair.

    Returns ``(m, f, link, report)``; ``report`` is set on the tick a cycle
    completes. A new cycle opens only when the mule's delay timer is zero and
    ``can_start`` (the fixed device is free). The opening tick already counts
    toward the cycle, so a dwell of ``params.cycle_steps(mode)`` ticks
    completes exactly one cycle.
    """
    m = replace(m, phase=f.id)
    if link is None:
        if m.cycle_timer > 0:
            return replace(m, cycle_timer=m.cycle_timer - 1), f, None, None
        if not can_start:
            return m, f, None, None
        link = CycleProgress(now, params.cycle_steps(mode))
    link = replace(link, remaining=link.remaining - 1)
    if link.remaining > 0:
        return m, f, link, None
    if mode == FIXED_TRAINING:
        trained_at = link.started + params.transfer_steps + params.train_steps - 1
        m, f, rep = fixed_training_cycle(m, f, now, hyper, rng, params, trained_at=trained_at)
    elif mode == MOBILE_TRAINING:
        m, f, rep = mobile_training_cycle(m, f, now, hyper, rng, params)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    return replace(m, cycle_timer=params.delay_d), f, None, rep


def mule_phase_tick(m: MuleState) -> MuleState:
    """Outside every space the mule just holds its snapshot."""
    if m.phase is MULE_PHASE and m.cycle_timer == 0:
        return m
    return replace(m, phase=MULE_PHASE, cycle_timer=0)
