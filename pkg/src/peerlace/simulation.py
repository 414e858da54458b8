"""Scenario execution: network assembly, the tick scheduler, metrics and output.

Deterministic mode steps every peer task once per tick, one after another,
in rank order (or in a seeded random order). Concurrent mode steps all
runnable tasks of a tick at the same time on a thread pool; stores and
queues are locked, so the protocol invariants still hold, but the
interleaving inside a tick is up to the OS.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Generator

import jsonschema
import numpy as np

from .aggregation import AggregationRule, ZenoConfig
from .faults import EPOCH_START, POST_HEARTBEAT, FaultInjector, apply_faults
from .identity import get_provider, init_network, join_network, provision_members
from .msgqueue import QueueService
from .peerstore import PeerStore, StoreAddress
from .runtime import (
    MODEL_KEY,
    EpochConfig,
    EpochContext,
    EpochOutcome,
    Network,
    Peer,
)
from .scenario import Scenario, sub_rng, validate
from .tensor import LabeledBatch, ModelParams, accuracy, forward_loss, make_two_gaussians, partition_dataset, shard

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "peer", "active_count", "train_loss", "val_accuracy", "bytes_in", "bytes_out", "event")

MAX_TICKS_PER_EPOCH = 1_000_000


class SimulationError(RuntimeError):
    pass


class Clock:
    def __init__(self):
        self.now = 0

    def __call__(self) -> int:
        return self.now

    def tick(self) -> None:
        self.now += 1


class Scheduler:
    """Advances peer task generators one tick at a time.

    ``after_tick(rank, marker)`` sees the marker each task yielded in the
    tick just finished and may return ``True`` to halt that task.
    """

    def __init__(self, clock: Clock, mode: str = "deterministic", order_rng: np.random.Generator | None = None):
        self.clock = clock
        self.mode = mode
        self.order_rng = order_rng
        self._pool = ThreadPoolExecutor(max_workers=32) if mode == "concurrent" else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def _order(self, ranks) -> list[int]:
        ranks = sorted(ranks)
        if self.order_rng is not None:
            ranks = [ranks[i] for i in self.order_rng.permutation(len(ranks))]
        return ranks

    @staticmethod
    def _step(gen: Generator):
        try:
            return False, next(gen)
        except StopIteration as stop:
            return True, stop.value

    def run(self, tasks: dict[int, Generator], after_tick: Callable[[int, str], bool] | None = None) -> dict:
        running = dict(tasks)
        results = {}
        for _ in range(MAX_TICKS_PER_EPOCH):
            if not running:
                return results
            order = self._order(running)
            if self._pool is None:
                stepped = [(r, self._step(running[r])) for r in order]
            else:
                futures = [(r, self._pool.submit(self._step, running[r])) for r in order]
                stepped = [(r, f.result()) for r, f in futures]
            markers = {}
            for r, (done, value) in stepped:
                if done:
                    results[r] = value
                    del running[r]
                else:
                    markers[r] = value
            self.clock.tick()
            if after_tick is not None:
                for r in sorted(markers):
                    if after_tick(r, markers[r]):
                        running.pop(r).close()
        raise SimulationError(f"epoch did not finish within {MAX_TICKS_PER_EPOCH} ticks")


# -- metrics -------------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    peer: int
    active_count: int
    train_loss: float
    val_accuracy: float
    bytes_in: int
    bytes_out: int
    event: str = ""

    def as_csv(self) -> list[str]:
        return [
            str(self.epoch),
            str(self.peer),
            str(self.active_count),
            repr(self.train_loss),
            repr(self.val_accuracy),
            str(self.bytes_in),
            str(self.bytes_out),
            self.event,
        ]


@dataclass
class Trace:
    """Raw protocol observations used by the invariant checks; never serialized."""

    outcomes: dict[int, dict[int, EpochOutcome]] = field(default_factory=dict)
    configs: dict[int, dict[int, EpochConfig]] = field(default_factory=dict)
    ownership: dict[int, dict[int, dict[int, tuple[int, ...]]]] = field(default_factory=dict)
    models: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)
    n_shards: int = 0
    joins: dict[int, int] = field(default_factory=dict)
    crashes: dict[int, int] = field(default_factory=dict)


@dataclass
class RunMetrics:
    scenario: dict
    rows: list[EpochRow]
    summary: dict
    ledgers: dict[int, dict]
    events: list[dict]
    trace: Trace = field(default_factory=Trace, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(row.as_csv())
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "rows": [
                {c: getattr(row, c) for c in CSV_COLUMNS} for row in self.rows
            ],
            "summary": self.summary,
            "ledgers": {str(r): v for r, v in sorted(self.ledgers.items())},
            "events": self.events,
        }

    def epoch_accuracy(self) -> dict[int, float]:
        """Mean validation accuracy over the peers reporting in each epoch."""
        acc: dict[int, list[float]] = {}
        for row in self.rows:
            if "crashed" not in row.event:
                acc.setdefault(row.epoch, []).append(row.val_accuracy)
        return {e: float(np.mean(v)) for e, v in sorted(acc.items())}


_row_schema = {
    "type": "object",
    "properties": {
        "epoch": {"type": "integer", "minimum": 1},
        "peer": {"type": "integer", "minimum": 0},
        "active_count": {"type": "integer", "minimum": 0},
        "train_loss": {"type": "number"},
        "val_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "bytes_in": {"type": "integer", "minimum": 0},
        "bytes_out": {"type": "integer", "minimum": 0},
        "event": {"type": "string"},
    },
    "required": list(CSV_COLUMNS),
    "additionalProperties": False,
}

METRICS_SCHEMA = {
    "type": "object",
    "properties": {
        "scenario": {"type": "object"},
        "rows": {"type": "array", "items": _row_schema},
        "summary": {"type": "object"},
        "ledgers": {"type": "object"},
        "events": {"type": "array", "items": {"type": "object"}},
    },
    "required": ["scenario", "rows", "summary", "ledgers", "events"],
    "additionalProperties": False,
}


def emit(metrics: RunMetrics, fmt: str, path: str | Path) -> Path:
    """Write ``metrics`` as ``csv`` or ``json`` to ``path``."""
    path = Path(path)
    if fmt == "csv":
        text = metrics.to_csv()
    elif fmt == "json":
        doc = metrics.to_json()
        jsonschema.validate(doc, METRICS_SCHEMA)
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}; use 'csv' or 'json'")
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


# -- simulation ---------------------------------------------------------------------


def _store_address(rank: int) -> StoreAddress:
    return StoreAddress(f"10.0.{rank // 200}.{rank % 200 + 10}", 6379)


class Simulation:
    """One scenario run: builds the network, drives epochs, collects metrics."""

    def __init__(self, scenario: Scenario):
        validate(scenario)
        self.scenario = s = scenario
        self.seed = s.seed
        self.clock = Clock()
        self.queues = QueueService(self.clock)
        self.network = Network(self.queues)
        self.provider = get_provider(s.crypto)
        self.initial_ranks = list(range(s.n_peers))
        self.injector: FaultInjector = apply_faults(s.faults, self)

        data = make_two_gaussians(s.dataset.n_samples, s.dataset.dim, s.dataset.separation, self.rng("data"))
        n_train = s.dataset.n_train
        self.train = data.take(0, n_train)
        self.validation = data.take(n_train, data.rows)
        self.zeno_batch = self._zeno_batch()

        self.catalog: list[LabeledBatch] = []
        ownership: dict[int, tuple[int, ...]] = {}
        for r in self.initial_ranks:
            shards = shard(partition_dataset(self.train, s.n_peers, r), s.training.batch_size)
            ownership[r] = tuple(range(len(self.catalog), len(self.catalog) + len(shards)))
            self.catalog.extend(shards)

        self.stores: dict[int, PeerStore] = {}
        self._passwords: dict[int, str] = {}
        for r in self.initial_ranks:
            self._make_store(r)
        members = provision_members(self.initial_ranks, self.stores, self._passwords, self._member_rng, self.provider)
        if len(members) > 1:
            report = init_network(members.values(), self.queues)
            if not report.ok:
                raise SimulationError(f"network initialization rejected peers {sorted(report.rejected)}")

        self.params0 = ModelParams(self.rng("model").normal(0.0, s.init_scale, s.dataset.dim), 0.0)
        self.peers: dict[int, Peer] = {}
        for r, m in members.items():
            peer = Peer(m, self.network, self.catalog, ownership)
            peer.install_model(self.params0)
            peer.publish_ownership()
            peer.state.loss_history.append(forward_loss(self.params0, self.validation))
            self.peers[r] = peer

        rule = AggregationRule(
            s.rule,
            s.byzantine_bound,
            s.geomed_tolerance,
            s.geomed_max_iter,
            ZenoConfig(self.zeno_batch, s.training.learning_rate, s.zeno_rho) if s.rule == "zeno" else None,
        )
        self.ctx = EpochContext(
            training=s.training,
            rule=rule,
            heartbeat=s.heartbeat,
            barrier_timeout=s.barrier_timeout,
            attack=s.attack,
            validation=self.validation,
            attack_rng=lambda rank, epoch: self.rng("attack", rank, epoch),
            compute_delay=self._compute_delay,
        )
        self.trace = Trace(n_shards=len(self.catalog))
        self.events: list[dict] = []
        self._last_model: dict[int, np.ndarray] = {}

    # -- helpers -----------------------------------------------------------------

    def rng(self, *label) -> np.random.Generator:
        return sub_rng(self.seed, *label)

    def _member_rng(self, rank: int, label: str) -> np.random.Generator:
        return self.rng("peer", rank, label)

    def _zeno_batch(self) -> LabeledBatch:
        # extra rows drawn past the end of the dataset: same class means, unseen samples
        s = self.scenario
        extra = make_two_gaussians(
            s.dataset.n_samples + s.dataset.zeno_samples, s.dataset.dim, s.dataset.separation, self.rng("data")
        )
        return extra.take(s.dataset.n_samples, extra.rows)

    def _compute_delay(self, rank: int, epoch: int) -> int:
        if self.scenario.max_compute_delay == 0:
            return 0
        return int(self.rng("delay", rank, epoch).integers(0, self.scenario.max_compute_delay + 1))

    def _make_store(self, rank: int) -> PeerStore:
        s = self.scenario
        pw = self.rng("password", rank).bytes(16).hex()
        store = PeerStore(
            _store_address(rank), pw, bytes_per_float=s.bytes_per_float, command_overhead=s.command_overhead
        )
        self._passwords[rank] = pw
        self.stores[rank] = store
        self.network.attach(store)
        return store

    def live_peers(self) -> dict[int, Peer]:
        return {r: p for r, p in sorted(self.peers.items()) if not p.crashed}

    def _event(self, epoch: int, rank: int, kind: str, **detail) -> None:
        self.events.append({"epoch": epoch, "peer": rank, "event": kind, **detail})

    def crash(self, rank: int, epoch: int) -> None:
        peer = self.peers[rank]
        if peer.crashed:
            return
        peer.crashed = True
        self._last_model[rank] = peer.store.inspect(self._passwords[rank], MODEL_KEY)
        peer.store.crash()
        self.trace.crashes[rank] = epoch
        self._event(epoch, rank, "crashed")
        log.info("epoch %d: peer %d crashed", epoch, rank)

    def _join(self, rank: int, epoch: int) -> None:
        live = self.live_peers()
        store = self._make_store(rank)
        member = provision_members([rank], self.stores, self._passwords, self._member_rng, self.provider)[rank]
        member.introductions = {r: (p.member.public_key, p.member.join_queue) for r, p in live.items()}
        report = join_network(member, [p.member for p in live.values()], self.queues)
        if not report.accepted:
            raise SimulationError(f"peer {rank} failed to join: {report.reason}")
        # the newcomer bootstraps from the lowest-ranked live peer's store
        donor = live[min(live)]
        donor_store = donor.store
        donor_pw = member.password_for(donor.rank)
        ownership = {int(r): tuple(v) for r, v in donor_store.get_record(donor_pw, "ownership").items()}
        peer = Peer(member, self.network, self.catalog, ownership)
        store.put_tensor(member.own_password(), MODEL_KEY, donor_store.get_tensor(donor_pw, MODEL_KEY))
        peer.state.loss_history = list(donor.state.loss_history)
        # it can only probe peers it trusts, so owners it never reached count as inactive from the start
        unreachable = set(ownership) - set(member.trusted) - {rank}
        peer.state.inactive_local = set(donor_store.get_record(donor_pw, "inactive")["ranks"]) | unreachable
        peer.state.epoch = epoch
        self.peers[rank] = peer
        self.trace.joins[rank] = epoch
        self._event(epoch, rank, "joined", latency_ticks=report.latency_ticks)

    # -- main loop -----------------------------------------------------------------

    def run(self) -> RunMetrics:
        s = self.scenario
        order_rng = self.rng("schedule") if s.order == "random" else None
        scheduler = Scheduler(self.clock, s.mode, order_rng)
        if s.mode == "concurrent":
            self.ctx.executor = ThreadPoolExecutor(max_workers=8)
        try:
            return self._run(scheduler)
        finally:
            scheduler.close()
            if self.ctx.executor is not None:
                self.ctx.executor.shutdown()

    def _run(self, scheduler: Scheduler) -> RunMetrics:
        s = self.scenario
        cfgs = {
            r: EpochConfig.make(1, len(p.state.assigned_shards), self.initial_ranks, s.training.convergence_interval)
            for r, p in self.peers.items()
        }
        rows: list[EpochRow] = []
        epochs_run = 0
        converged_epoch = None
        for epoch in range(1, s.training.max_epochs + 1):
            started = {r for r in self.injector.crashes(epoch, EPOCH_START) if r in self.live_peers()}
            for r in sorted(started):
                self.crash(r, epoch)
            live = self.live_peers()
            if not live:
                raise SimulationError(f"no live peers left at epoch {epoch}")
            post_hb = set(self.injector.crashes(epoch, POST_HEARTBEAT)) & set(live)

            def after_tick(rank: int, marker: str) -> bool:
                if rank in post_hb and marker == "heartbeat":
                    self.crash(rank, epoch)
                    return True
                return False

            tasks = {r: p.run_epoch(cfgs[r], self.ctx) for r, p in live.items()}
            outcomes = scheduler.run(tasks, after_tick)
            epochs_run = epoch

            self.trace.outcomes[epoch] = outcomes
            self.trace.configs[epoch] = {r: cfgs[r] for r in live}
            self.trace.models[epoch] = {
                r: np.array(self.peers[r].store.inspect(self.peers[r].member.own_password(), MODEL_KEY))
                for r in outcomes
            }
            for r in sorted(set(live) | started):
                rows.append(self._row(epoch, r, outcomes.get(r)))

            consensus = {r: o.consensus for r, o in outcomes.items()}
            for r, o in outcomes.items():
                for ev in o.events:
                    self._event(epoch, r, ev.split("=")[0], detail=ev)

            joined = []
            for r in self.injector.joins_after(epoch):
                self._join(r, epoch)
                joined.append(r)
                donor = min(outcomes)
                consensus[r] = consensus[donor]
                cfgs[r] = cfgs[donor]

            for r in sorted(self.live_peers()):
                if r in consensus:
                    cfgs[r] = self.peers[r].finish_epoch(cfgs[r], consensus[r], s.training, joined)
            self.trace.ownership[epoch] = {r: dict(p.state.ownership) for r, p in self.live_peers().items()}

            if outcomes and all(o.converged for o in outcomes.values()):
                converged_epoch = converged_epoch or epoch
                if s.stop_on_convergence:
                    break

        return RunMetrics(
            scenario=s.to_json(),
            rows=rows,
            summary=self._summary(rows, epochs_run, converged_epoch),
            ledgers={r: p.store.ledger_report().to_dict() for r, p in sorted(self.peers.items())},
            events=self.events,
            trace=self.trace,
        )

    def _row(self, epoch: int, rank: int, outcome: EpochOutcome | None) -> EpochRow:
        peer = self.peers[rank]
        store = peer.store
        flat = self._last_model[rank] if peer.crashed else store.inspect(self._passwords[rank], MODEL_KEY)
        params = ModelParams.from_flat(flat)
        ledger = store.ledger_report()
        if outcome is None:
            events, active = ["crashed"], 0
        else:
            events, active = outcome.events, len(outcome.heartbeat.active)
        if self.trace.joins.get(rank) == epoch - 1 and outcome is not None:
            events = ["joined", *events]
        return EpochRow(
            epoch,
            rank,
            active,
            forward_loss(params, self.train),
            accuracy(params, self.validation),
            ledger.bytes_in,
            ledger.bytes_out,
            ";".join(events),
        )

    def _summary(self, rows: list[EpochRow], epochs_run: int, converged_epoch) -> dict:
        last = [r for r in rows if r.epoch == epochs_run and "crashed" not in r.event]
        acc_by_epoch: dict[int, list[float]] = {}
        for r in rows:
            if "crashed" not in r.event:
                acc_by_epoch.setdefault(r.epoch, []).append(r.val_accuracy)
        to_threshold = next((e for e, v in sorted(acc_by_epoch.items()) if min(v) >= 0.9), None)

        def first(kind: str):
            return next((e["epoch"] for e in self.events if e["event"] == kind), None)

        consensus_epoch = first("consensus_inactive")
        return {
            "epochs_run": epochs_run,
            "final_accuracy": float(np.mean([r.val_accuracy for r in last])) if last else None,
            "final_train_loss": float(np.mean([r.train_loss for r in last])) if last else None,
            "epochs_to_threshold": to_threshold,
            "detection_epoch": first("heartbeat_inactive"),
            "consensus_epoch": consensus_epoch,
            "recovery_epoch": consensus_epoch + 1 if consensus_epoch is not None else None,
            "converged_epoch": converged_epoch,
            "join_epochs": sorted(self.trace.joins.values()),
            "final_active": sorted(self.live_peers()),
        }


def run_scenario(scenario: Scenario) -> RunMetrics:
    return Simulation(scenario).run()
