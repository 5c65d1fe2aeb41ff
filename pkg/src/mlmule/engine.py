"""Discrete-time simulation loop and evaluation protocol.

Every run draws from four independent streams spawned from the master
seed: mobility, data, model initialisation and learning. Mobility never
touches the learning stream, so methods that ignore positions produce the
same learning trajectory whatever the mobility settings.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import baselines as bl
from .config import SimConfig
from .learner import Hyperparams, ModelSnapshot, evaluate, init_model, train
from .metrics import MetricsLog, MetricsRow, moving_average  # noqa: F401  (re-exported)
from .partition import (
    PartitionAssignment,
    partition_dirichlet,
    partition_iid,
    partition_shards,
    seed_mobile_data,
    split_indices,
    synth_dataset,
    train_test_split,
)
from .protocol import (
    FIXED_TRAINING,
    MOBILE_TRAINING,
    FixedDeviceState,
    MuleState,
    in_house_tick,
    mule_phase_tick,
)
from .worldsim import (
    build_world,
    load_trace,
    locate,
    random_point_in_space,
    step_random_walk,
    synth_trace,
    trace_timeline,
)

log = logging.getLogger(__name__)

EVAL_STREAM = 7919
PRETRAIN_STREAM = 104729


def pretrain(params, train_ds, test_ds, hyper: Hyperparams, rng, patience: int = 3, cap: int = 200):
    """Train epoch by epoch until test accuracy has not improved for ``patience`` epochs.

    Returns the best parameters seen. Devices without test data fall back to
    training accuracy as the stopping signal.
    """
    if train_ds is None or len(train_ds) == 0:
        return params
    probe = test_ds if test_ds is not None and len(test_ds) else train_ds
    one = replace(hyper, epochs=1)
    best, best_acc = params, evaluate(params, probe).accuracy
    stale = 0
    current = params
    for _ in range(cap):
        current = train(current, train_ds, one, rng)
        acc = evaluate(current, probe).accuracy
        if acc > best_acc:
            best, best_acc, stale = current, acc, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best


def pretrain_all(devices: dict, hyper: Hyperparams, seed: int, patience: int = 3, cap: int = 200) -> dict:
    """Pretrain every data-holding device; snapshots are stamped ``last_update = 0``."""
    out = {}
    for key in sorted(devices):
        dev = devices[key]
        if dev.local_train is None or len(dev.local_train) == 0:
            out[key] = dev
            continue
        rng = np.random.default_rng([seed, PRETRAIN_STREAM, _entity_code(dev), dev.id])
        params = pretrain(dev.snapshot.params, dev.local_train, dev.local_test, hyper, rng, patience, cap)
        out[key] = replace(dev, snapshot=ModelSnapshot(params, 0, len(dev.local_train)))
    return out


def _entity_code(dev) -> int:
    return 1 if isinstance(dev, MuleState) else 0


def _entity(dev) -> str:
    return f"m{dev.id}" if isinstance(dev, MuleState) else f"f{dev.id}"


def evaluate_device(dev, test_ds, hyper: Hyperparams, t: int, seed: int):
    """(pre, post, loss) for one device; the fine-tuned copy is thrown away."""
    pre = evaluate(dev.snapshot.params, test_ds)
    ds = dev.local_train
    if ds is None or len(ds) == 0:
        return pre.accuracy, pre.accuracy, pre.loss
    rng = np.random.default_rng([seed, EVAL_STREAM, t, _entity_code(dev), dev.id])
    tuned = train(dev.snapshot.params, ds, replace(hyper, epochs=1), rng)
    return pre.accuracy, evaluate(tuned, test_ds).accuracy, pre.loss


def make_partition(cfg: SimConfig, ds, world, rng) -> PartitionAssignment:
    """The partition a run uses: over fixed devices, or per space for shards."""
    if cfg.scheme == "shards":
        return partition_shards(ds, world, rng)
    owners = [s.fixed_device for s in world.spaces]
    if cfg.scheme == "iid":
        return partition_iid(ds, owners, rng)
    return partition_dirichlet(ds, owners, cfg.alpha, rng)


def data_stream(seed: int):
    """The generator that drives dataset synthesis and partitioning for ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[1])


@dataclass
class _Link:
    mule: int
    progress: object


class Simulation:
    """State and tick loop for one (config, seed) run."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.mode = cfg.mode
        self.hyper = cfg.hyperparams()
        self.proto = cfg.protocol_params()
        self.world = build_world(cfg.world_config())
        ss = np.random.SeedSequence(cfg.seed)
        mob_ss, data_ss, init_ss, learn_ss = ss.spawn(4)
        self.rng_mob = np.random.default_rng(mob_ss)
        self.rng_data = np.random.default_rng(data_ss)
        self.rng_learn = np.random.default_rng(learn_ss)
        self.arch = cfg.architecture()
        self.init_params = init_model(self.arch, np.random.default_rng(init_ss))
        self.n_spaces = len(self.world.spaces)
        self.timeline = None
        self._setup_mobility_source()
        self._setup_data()
        self._setup_mobility_state()
        self.fixed = pretrain_all(self.fixed, self.hyper, cfg.seed, cfg.pretrain_patience, cfg.pretrain_cap)
        self.mules = pretrain_all(self.mules, self.hyper, cfg.seed, cfg.pretrain_patience, cfg.pretrain_cap)
        self.log = MetricsLog()
        self.exchanges = 0
        self.round = 0
        self.current: dict[int, int | None] = {}

    # --- setup -------------------------------------------------------------

    def _setup_mobility_source(self):
        cfg = self.cfg
        self.trace = None
        if cfg.trace == "synthetic":
            self.trace = synth_trace(cfg.trace_users, self.n_spaces, cfg.total_steps + 1, self.rng_mob,
                                     cfg.trace_visits, cfg.trace_dwell, cfg.trace_lifetime)
        elif cfg.trace:
            self.trace = load_trace(cfg.trace, self.n_spaces)
        if self.trace is not None:
            self.n_mules = max(self.trace.n_users, len({r.user for r in self.trace.records}))
            self.timeline = trace_timeline(self.trace, cfg.total_steps + 1)
            first = {}
            for r in self.trace.records:
                first.setdefault(r.user, r.place)
            self.home = {m: first.get(m, m % self.n_spaces) for m in range(self.n_mules)}
        else:
            self.n_mules = cfg.n_mules
            self.home = {m: m % self.n_spaces for m in range(self.n_mules)}

    def _setup_data(self):
        cfg = self.cfg
        ds = synth_dataset(cfg.synth_spec(), self.rng_data)
        self.dataset = ds
        blank = ModelSnapshot(self.init_params, 0, 0)
        self.space_test: dict[int, object] = {}
        self.arrivals: dict[int, list] = {}
        self._arrival_warned: set[int] = set()
        self._no_test_warned: set[str] = set()
        fixed_ids = [s.fixed_device for s in self.world.spaces]
        if self.mode == FIXED_TRAINING:
            assign = make_partition(cfg, ds, self.world, self.rng_data)
            self.fixed = {}
            for fid in fixed_ids:
                local = ds.subset(assign.parts[fid])
                tr, te = train_test_split(local, cfg.test_frac, self.rng_data, allow_singletons=True)
                self.fixed[fid] = FixedDeviceState(fid, blank, local_train=tr, local_test=te)
                self.space_test[fid] = te
            self.mules = {m: MuleState(m, blank, home_space=self.home[m]) for m in range(self.n_mules)}
            return

        assign = make_partition(cfg, ds, self.world, self.rng_data)
        pools = {}
        for sid in fixed_ids:
            idx = assign.parts[sid]
            tr, te = split_indices(ds.labels[idx], cfg.test_frac, self.rng_data)
            self.space_test[sid] = ds.subset(idx[te])
            pools[sid] = idx[tr]
        train_assign = PartitionAssignment(pools, assign.pooled)
        taken = np.zeros(0, dtype=np.int64)
        self.mules = {}
        for m in range(self.n_mules):
            home = self.home[m]
            idx = seed_mobile_data(ds, train_assign, home, cfg.n_local, cfg.n_general, self.rng_data, taken)
            taken = np.concatenate([taken, idx])
            self.mules[m] = MuleState(m, blank, local_train=ds.subset(idx),
                                      local_test=self.space_test[home], home_space=home)
        for sid in fixed_ids:
            rest = np.setdiff1d(pools[sid], taken)
            self.arrivals[sid] = list(self.rng_data.permutation(rest))
        self.fixed = {fid: FixedDeviceState(fid, blank, local_test=self.space_test[fid]) for fid in fixed_ids}

    def _setup_mobility_state(self):
        self.positions = {}
        self.mule_area = {}
        if self.trace is not None:
            return
        for m in range(self.n_mules):
            space = self.world.space(self.home[m])
            area = self.world.area_of_space(space.id)
            self.mule_area[m] = area
            self.positions[m] = random_point_in_space(space, area, self.rng_mob)

    # --- per-tick phases ---------------------------------------------------

    def _advance_mobility(self, t: int) -> dict[int, int | None]:
        if self.trace is not None:
            where = {m: None for m in range(self.n_mules)}
            for c in self.timeline.get(t, ()):
                where[c.mule] = c.fixed
            return where
        p_cross = self.cfg.p_cross
        where = {}
        for m in range(self.n_mules):
            area = self.mule_area[m]
            pos = step_random_walk(self.positions[m], area, self.world, p_cross, self.rng_mob)
            self.positions[m] = pos
            sid = locate(pos, self.world)
            where[m] = None if sid is None else self.world.space(sid).fixed_device
        return where

    def _data_arrival(self, where):
        for m in range(self.n_mules):
            fid = where[m]
            if fid is None:
                continue
            pool = self.arrivals.get(fid)
            if not pool:
                if fid not in self._arrival_warned:
                    log.warning("arrival pool of space %d exhausted", fid)
                    self._arrival_warned.add(fid)
                continue
            i = pool.pop()
            mule = self.mules[m]
            ds = self.dataset
            self.mules[m] = replace(mule, local_train=mule.local_train.append(ds.features[i], ds.labels[i]))

    def _in_house(self, t: int, where, gossip_busy) -> int:
        done = 0
        processed = set()
        for m in range(self.n_mules):
            prev, cur = self.current.get(m), where[m]
            if prev is not None and prev != cur:
                link = self.links.get(prev)
                if link is not None and link.mule == m:
                    del self.links[prev]  # aborted: nothing was committed
                self.members[prev].remove(m)
            if cur is None:
                self.mules[m] = mule_phase_tick(self.mules[m])
            elif prev != cur:
                self.members.setdefault(cur, []).append(m)
        self.current = dict(where)

        for fid in sorted(self.members):
            link = self.links.get(fid)
            # the tick that completes a cycle still belongs to it
            free = link is None
            if link is not None:
                done += self._tick_pair(t, link.mule, fid, link.progress, processed)
            for m in list(self.members[fid]):
                if m in processed or m in gossip_busy:
                    continue
                done += self._tick_pair(t, m, fid, None, processed, can_start=free)
                free = free and self.links.get(fid) is None
        return done

    def _tick_pair(self, t, m, fid, progress, processed, can_start=True) -> int:
        mule, dev = self.mules[m], self.fixed[fid]
        mule, dev, progress, rep = in_house_tick(mule, dev, t, progress, mode=self.mode, hyper=self.hyper,
                                                 rng=self.rng_learn, params=self.proto, can_start=can_start)
        self.mules[m], self.fixed[fid] = mule, dev
        processed.add(m)
        if progress is not None:
            self.links[fid] = _Link(m, progress)
            return 0
        if rep is None:
            return 0
        self.links.pop(fid, None)
        members = self.members[fid]
        members.remove(m)
        members.append(m)
        self.log.cycles.append(rep)
        return 1

    def _encounters(self, t: int, method: str) -> tuple[int, set]:
        """Advance device-to-device sessions; returns (completed, busy mules)."""
        r2 = self.world.comm_radius_mobile ** 2
        pos = self.positions

        def in_range(a, b):
            (xa, ya), (xb, yb) = pos[a], pos[b]
            return (xa - xb) ** 2 + (ya - yb) ** 2 <= r2

        done = 0
        touched = set()
        for pair in sorted(self.sessions):
            a, b = pair
            if not in_range(a, b):
                del self.sessions[pair]
                continue
            self.sessions[pair] -= 1
            touched.update(pair)
            if self.sessions[pair] == 0:
                del self.sessions[pair]
                done += self._finish_encounter(t, a, b, method)
        busy = {m for pair in self.sessions for m in pair}
        in_house_busy = {link.mule for link in self.links.values()}
        steps = bl.encounter_steps(method, self.proto.transfer_steps)
        free = [m for m in range(self.n_mules) if m not in busy and m not in touched and m not in in_house_busy]
        taken = set()
        for a in free:
            if a in taken:
                continue
            for b in free:
                if b <= a or b in taken or not in_range(a, b):
                    continue
                taken.update((a, b))
                if steps <= 1:
                    done += self._finish_encounter(t, a, b, method)
                else:
                    self.sessions[(a, b)] = steps - 1
                break
        return done, {m for pair in self.sessions for m in pair}

    def _finish_encounter(self, t, a, b, method) -> int:
        fn = bl.oppcl_encounter if method == "oppcl" else bl.gossip_encounter
        self.mules[a], self.mules[b] = fn(self.mules[a], self.mules[b], self.hyper,
                                          self.rng_learn, self.rng_learn, t)
        return 1

    def _data_holders(self) -> dict:
        return self.fixed if self.mode == FIXED_TRAINING else self.mules

    def _local_round(self, t: int):
        holders = self._data_holders()
        for key in sorted(holders):
            holders[key] = bl.local_only_step(holders[key], self.hyper, self.rng_learn, t)

    def _fedavg_round(self, t: int):
        holders = self._data_holders()
        keys = [k for k in sorted(holders) if holders[k].local_train is not None and len(holders[k].local_train)]
        for k in keys:
            holders[k] = bl.local_only_step(holders[k], self.hyper, self.rng_learn, t)
        self.server = bl.fedavg_round(self.server, [holders[k].snapshot for k in keys], t)
        g = self.server.global_snapshot
        for k in sorted(holders):
            dev = holders[k]
            n = len(dev.local_train) if dev.local_train is not None else 0
            holders[k] = replace(dev, snapshot=ModelSnapshot(g.params, g.last_update, n))
        return len(keys)

    # --- evaluation --------------------------------------------------------

    def evaluate_devices(self, t: int) -> list[MetricsRow]:
        rows = []
        cfg = self.cfg
        if self.mode == FIXED_TRAINING:
            devices = [(self.fixed[k], self.fixed[k].local_test) for k in sorted(self.fixed)]
        else:
            devices = []
            for m in sorted(self.mules):
                fid = self.current.get(m)
                sid = fid if fid is not None else self.home[m]
                devices.append((self.mules[m], self.space_test[sid]))
        for dev, test in devices:
            if test is None or len(test) == 0:
                name = _entity(dev)
                if name not in self._no_test_warned:
                    log.warning("%s has no test data; its rows are omitted", name)
                    self._no_test_warned.add(name)
                continue
            pre, post, loss = evaluate_device(dev, test, self.hyper, t, cfg.seed)
            rows.append(MetricsRow(t, self.round, _entity(dev), pre, post, loss, self.exchanges,
                                   cfg.method, cfg.seed))
        return rows

    # --- main loop ---------------------------------------------------------

    def run(self) -> MetricsLog:
        cfg = self.cfg
        method = cfg.method
        uses_mule = method in ("mlmule", "mlmule+gossip")
        uses_gossip = method in ("gossip", "oppcl", "mlmule+gossip")
        per_tick_rounds = method in ("local", "fedavg")
        self.links: dict[int, _Link] = {}
        self.members: dict[int, list] = {}
        self.sessions: dict[tuple, int] = {}
        if method == "fedavg":
            self.server = bl.CentralServer(ModelSnapshot(self.init_params, 0, 0))

        rows = self.evaluate_devices(0)
        self.log.extend(rows)
        best = _mean_post(rows)
        best_round = 0

        for t in range(1, cfg.total_steps + 1):
            where = self._advance_mobility(t)
            if self.mode == MOBILE_TRAINING:
                self._data_arrival(where)
            done = 0
            busy = set()
            if uses_gossip:
                n, busy = self._encounters(t, "oppcl" if method == "oppcl" else "gossip")
                done += n
            if uses_mule:
                done += self._in_house(t, where, busy)
            else:
                self.current = dict(where)
            if method == "local":
                self._local_round(t)
            elif method == "fedavg":
                done += self._fedavg_round(t)
            self.exchanges += done

            prev_round = self.round
            if per_tick_rounds:
                self.round += 1
            else:
                self.round = self.exchanges // cfg.exchanges_per_round
            boundary = self.round > prev_round
            if not boundary and t % cfg.eval_every:
                continue
            rows = self.evaluate_devices(t)
            self.log.extend(rows)
            if boundary and rows:
                score = _mean_post(rows)
                if score > best:
                    best, best_round = score, self.round
                elif self.round - best_round >= cfg.patience_rounds:
                    self.log.stopped_early = True
                    break
        return self.log


def _mean_post(rows) -> float:
    return float(np.mean([r.post_acc for r in rows])) if rows else -np.inf


def run_simulation(cfg: SimConfig) -> MetricsLog:
    """Run one configuration to completion (or early stop)."""
    return Simulation(cfg).run()
