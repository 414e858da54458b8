"""The per-peer epoch workflow.

One call to :meth:`Peer.run_epoch` plays the part of one per-epoch workflow
instance: heartbeat, gradient computation over the peer's shards, in-store
local averaging, the sync barrier, robust aggregation, the in-store model
update, an occasional convergence check, and the unanimity vote on inactive
peers. It is a generator: every ``yield`` hands one logical clock tick back
to the scheduler, and the epoch's :class:`EpochOutcome` is its return value.

Peers interact only through stores and queues.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .aggregation import AggregationRule
from .faults import AttackSpec
from .identity import Member
from .msgqueue import Queue, QueueService
from .peerstore import KeyNotFound, PeerStore, StoreAddress, StoreUnavailable
from .tensor import (
    ContractViolation,
    LabeledBatch,
    ModelParams,
    TrainingConfig,
    compute_gradient,
    forward_loss,
)

log = logging.getLogger(__name__)

SYNC_QUEUE = "sync"
MODEL_KEY = "model"
GRAD_PREFIX = "grad/"
LOCAL_AVG_KEY = "local_avg"
AGGREGATE_KEY = "aggregate"

Ownership = Mapping[int, tuple[int, ...]]


class UnrecoverableError(RuntimeError):
    """No active peer is left to take over the training data."""


@dataclass(frozen=True)
class EpochConfig:
    epoch: int
    parallelism: int
    convergence_check: bool
    active_ranks: frozenset[int]

    def __post_init__(self):
        if self.epoch < 1 or self.parallelism < 1:
            raise ContractViolation("epoch and parallelism must be >= 1")
        object.__setattr__(self, "active_ranks", frozenset(self.active_ranks))

    @classmethod
    def make(cls, epoch: int, parallelism: int, active_ranks: Iterable[int], convergence_interval: int) -> "EpochConfig":
        return cls(epoch, parallelism, epoch % convergence_interval == 0, frozenset(active_ranks))


@dataclass(frozen=True)
class HeartbeatConfig:
    timeout: int = 5
    trials: int = 3

    def __post_init__(self):
        if self.trials < 1 or self.timeout < 1:
            raise ContractViolation("heartbeat trials and timeout must be >= 1")


@dataclass(frozen=True)
class HeartbeatResult:
    active: frozenset[int]
    newly_inactive: frozenset[int]
    probes: Mapping[int, int]
    ticks: int


@dataclass(frozen=True)
class BarrierResult:
    complete: bool
    seen: frozenset[int]
    missing: frozenset[int]
    waited: int
    count: int


@dataclass
class PeerState:
    rank: int
    trusted: dict
    ownership: dict[int, tuple[int, ...]]
    inactive_local: set[int] = field(default_factory=set)
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def assigned_shards(self) -> tuple[int, ...]:
        return self.ownership.get(self.rank, ())


@dataclass
class EpochOutcome:
    rank: int
    epoch: int
    heartbeat: HeartbeatResult
    barrier: BarrierResult
    participants: tuple[int, ...]
    skipped: tuple[int, ...]
    inactive_lists: dict[int, frozenset[int]]
    consensus: frozenset[int]
    converged: bool
    events: list[str]


@dataclass
class EpochContext:
    """Everything shared by all peers for one run."""

    training: TrainingConfig
    rule: AggregationRule
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    barrier_timeout: int = 100
    attack: AttackSpec = field(default_factory=AttackSpec)
    validation: LabeledBatch | None = None
    attack_rng: Callable[[int, int], np.random.Generator] | None = None
    compute_delay: Callable[[int, int], int] = lambda rank, epoch: 0
    executor: Executor | None = None


# -- pure protocol pieces -------------------------------------------------------


def heartbeat_check(state: PeerState, probe: Callable[[int], bool], cfg: HeartbeatConfig) -> HeartbeatResult:
    """Probe every trusted peer up to ``cfg.trials`` times.

    A probe that gets no answer costs ``cfg.timeout`` ticks; probes to
    different peers run side by side, so the phase lasts as long as the
    slowest peer's sequence of trials.
    """
    if not state.trusted:
        return HeartbeatResult(frozenset({state.rank}), frozenset(), {}, 1)
    responders, silent, probes = set(), set(), {}
    ticks = 1
    for r in sorted(state.trusted):
        for trial in range(1, cfg.trials + 1):
            if probe(r):
                responders.add(r)
                ticks = max(ticks, (trial - 1) * cfg.timeout + 1)
                break
        else:
            silent.add(r)
            ticks = max(ticks, cfg.trials * cfg.timeout)
        probes[r] = trial
    newly = silent - state.inactive_local
    state.inactive_local = (state.inactive_local - responders) | silent
    return HeartbeatResult(frozenset(responders | {state.rank}), frozenset(newly), probes, ticks)


def _senders(queue: Queue, count: int) -> frozenset[int]:
    return frozenset(m.sender_rank for m in queue.receive(max(count, 1)))


def sync_barrier(queue: Queue, active_ranks: Iterable[int], timeout: int) -> Iterator[str]:
    """Wait until the queue holds one completion message per active peer.

    Generator; use as ``result = yield from sync_barrier(...)``. Gives up
    after ``timeout`` ticks and reports which active peers stayed silent.
    """
    active = frozenset(active_ranks)
    if not active:
        raise ContractViolation("barrier needs at least one active peer")
    waited = 0
    while True:
        count = queue.count()
        if count >= len(active) or waited >= timeout:
            seen = _senders(queue, count) if count else frozenset()
            return BarrierResult(count >= len(active), seen, active - seen, waited, count)
        waited += 1
        yield "barrier"


def convergence_check(loss_history: Sequence[float], cfg: TrainingConfig) -> bool:
    """True when the validation loss moved less than the tolerance since the previous check.

    ``loss_history`` holds one validation loss per check, starting with the
    loss of the initial model.
    """
    if len(loss_history) < 2:
        return False
    return abs(loss_history[-2] - loss_history[-1]) < cfg.convergence_tolerance


def consensus_inactive(all_local_lists: Mapping[int, Iterable[int]]) -> frozenset[int]:
    """A peer is inactive only if every list names it."""
    lists = [frozenset(v) for v in all_local_lists.values()]
    if not lists:
        return frozenset()
    return frozenset.intersection(*lists)


def _split(items: Sequence[int], n: int) -> list[list[int]]:
    base, extra = divmod(len(items), n)
    out, start = [], 0
    for i in range(n):
        stop = start + base + (1 if i < extra else 0)
        out.append(list(items[start:stop]))
        start = stop
    return out


def redistribute(failed: Iterable[int], active: Iterable[int], ownership: Ownership) -> dict[int, tuple[int, ...]]:
    """Hand the shards of failed peers to the active ones.

    The failed peers' shards, taken in ascending failed-rank order, are cut
    into ``len(active)`` contiguous segments; segment ``i`` goes to the
    ``i``-th lowest active rank, and lower ranks absorb the remainder.
    """
    failed = set(failed) & set(ownership)
    active = sorted(set(active))
    if failed & set(active):
        raise ContractViolation(f"ranks {sorted(failed & set(active))} are both failed and active")
    if not failed:
        return dict(ownership)
    if not active:
        raise UnrecoverableError("every peer has failed; nobody can take over the data")
    pooled = [s for r in sorted(failed) for s in ownership[r]]
    new = {r: tuple(v) for r, v in ownership.items() if r not in failed}
    for r, segment in zip(active, _split(pooled, len(active))):
        new[r] = new.get(r, ()) + tuple(segment)
    return new


def admit(joined: Iterable[int], ownership: Ownership) -> dict[int, tuple[int, ...]]:
    """Rebalance every shard over the current owners plus the newcomers, in rank order."""
    joined = set(joined) - set(ownership)
    if not joined:
        return dict(ownership)
    pooled = [s for r in sorted(ownership) for s in ownership[r]]
    ranks = sorted(set(ownership) | joined)
    return {r: tuple(seg) for r, seg in zip(ranks, _split(pooled, len(ranks)))}


def trigger_next_epoch(
    state: PeerState,
    previous: EpochConfig,
    consensus_result: Iterable[int],
    ownership: Ownership,
    cfg: TrainingConfig,
    joined: Iterable[int] = (),
) -> EpochConfig:
    active = (previous.active_ranks - frozenset(consensus_result)) | frozenset(joined)
    return EpochConfig.make(previous.epoch + 1, len(ownership[state.rank]), active, cfg.convergence_interval)


# -- the peer ----------------------------------------------------------------------


class Network:
    """Simulated address space: store lookup by address, plus the queue service."""

    def __init__(self, queues: QueueService):
        self.queues = queues
        self._stores: dict[StoreAddress, PeerStore] = {}

    def attach(self, store: PeerStore) -> None:
        self._stores[store.address] = store

    def store(self, address: StoreAddress) -> PeerStore:
        try:
            return self._stores[address]
        except KeyError:
            raise StoreUnavailable(f"no store at {address}") from None

    def ping(self, address: StoreAddress) -> bool:
        try:
            return self.store(address).ping()
        except StoreUnavailable:
            return False


class Peer:
    def __init__(self, member: Member, network: Network, catalog: Sequence[LabeledBatch], ownership: Ownership):
        self.member = member
        self.network = network
        self.catalog = catalog
        self.state = PeerState(member.rank, member.trusted, {r: tuple(v) for r, v in ownership.items()})
        self.crashed = False

    def __repr__(self) -> str:
        return f"Peer(rank={self.rank}, epoch={self.state.epoch}, shards={len(self.state.assigned_shards)})"

    @property
    def rank(self) -> int:
        return self.member.rank

    @property
    def store(self) -> PeerStore:
        return self.member.store

    @property
    def _pw(self) -> str:
        return self.member.own_password()

    def _remote(self, rank: int) -> tuple[PeerStore, str]:
        record = self.state.trusted[rank]
        return self.network.store(record.store_address), self.member.password_for(rank)

    def model(self) -> ModelParams:
        """Current parameters, read without charging the ledger (metrics only)."""
        return ModelParams.from_flat(self.store.inspect(self._pw, MODEL_KEY))

    def install_model(self, params: ModelParams) -> None:
        self.store.put_tensor(self._pw, MODEL_KEY, params.flatten())

    def publish_ownership(self) -> None:
        self.store.put_record(self._pw, "ownership", {str(r): list(v) for r, v in sorted(self.state.ownership.items())})

    # -- phases ------------------------------------------------------------------

    def heartbeat_check(self, cfg: HeartbeatConfig) -> HeartbeatResult:
        def probe(rank: int) -> bool:
            return self.network.ping(self.state.trusted[rank].store_address)

        return heartbeat_check(self.state, probe, cfg)

    def compute_phase(self, epoch_cfg: EpochConfig, executor: Executor | None = None) -> None:
        shard_ids = self.state.assigned_shards
        if not shard_ids:
            raise ContractViolation(f"peer {self.rank} has no shards assigned")
        if epoch_cfg.parallelism != len(shard_ids):
            raise ContractViolation(
                f"peer {self.rank}: parallelism {epoch_cfg.parallelism} != {len(shard_ids)} assigned shards"
            )
        pw = self._pw
        self.store.delete_tensors(pw, GRAD_PREFIX)

        def task(i: int) -> None:
            # each parallel task pulls the model and pushes its own gradient
            params = ModelParams.from_flat(self.store.get_tensor(pw, MODEL_KEY))
            grad = compute_gradient(params, self.catalog[shard_ids[i]])
            self.store.put_tensor(pw, f"{GRAD_PREFIX}{i}", grad)

        if executor is None:
            for i in range(len(shard_ids)):
                task(i)
        else:
            list(executor.map(task, range(len(shard_ids))))

    def local_average_phase(self, epoch_cfg: EpochConfig, ctx: EpochContext | None = None) -> None:
        pw = self._pw
        keys = [f"{GRAD_PREFIX}{i}" for i in range(len(self.state.assigned_shards))]
        self.store.instore_average(pw, keys, LOCAL_AVG_KEY)
        if ctx is not None and ctx.attack.targets(self.rank):
            honest = self.store.get_tensor(pw, LOCAL_AVG_KEY)
            rng = ctx.attack_rng(self.rank, epoch_cfg.epoch) if ctx.attack_rng else np.random.default_rng()
            self.store.put_tensor(pw, LOCAL_AVG_KEY, ctx.attack.apply(honest, rng))
        payload = json.dumps({"rank": self.rank, "epoch": epoch_cfg.epoch}, sort_keys=True).encode()
        self.network.queues[SYNC_QUEUE].send(self.rank, payload)

    def aggregate_phase(self, participants: Iterable[int], rule: AggregationRule):
        """Fetch every participant's local average, aggregate, store the result.

        Returns ``(aggregate, used_ranks, skipped_ranks)``; peers whose store
        cannot be read are skipped.
        """
        pw = self._pw
        vectors, used, skipped = [], [], []
        for r in sorted(set(participants)):
            try:
                if r == self.rank:
                    v = self.store.reference(pw, LOCAL_AVG_KEY)
                else:
                    store, their_pw = self._remote(r)
                    v = store.get_tensor(their_pw, LOCAL_AVG_KEY)
            except (StoreUnavailable, KeyNotFound, KeyError):
                skipped.append(r)
                continue
            vectors.append(v)
            used.append(r)
        params = ModelParams.from_flat(self.store.reference(pw, MODEL_KEY))
        agg = rule.apply(vectors, params)
        self.store.put_tensor(pw, AGGREGATE_KEY, agg)
        return agg, tuple(used), tuple(skipped)

    def update_phase(self, learning_rate: float) -> None:
        self.store.instore_model_update(self._pw, MODEL_KEY, AGGREGATE_KEY, learning_rate)

    def check_convergence(self, validation: LabeledBatch, cfg: TrainingConfig) -> bool:
        params = ModelParams.from_flat(self.store.get_tensor(self._pw, MODEL_KEY))
        self.state.loss_history.append(forward_loss(params, validation))
        return convergence_check(self.state.loss_history, cfg)

    def publish_inactive(self, epoch: int) -> None:
        self.store.put_record(self._pw, "inactive", {"epoch": epoch, "ranks": sorted(self.state.inactive_local)})

    def gather_inactive_lists(self, ranks: Iterable[int], epoch: int, timeout: int):
        """Collect this epoch's inactive list from each of ``ranks``.

        Generator: a list not yet published for ``epoch`` is retried every
        tick until ``timeout``; unreachable peers are left out.
        """
        pending = set(ranks)
        lists: dict[int, frozenset[int]] = {}
        waited = 0
        while True:
            for r in sorted(pending):
                try:
                    if r == self.rank:
                        doc = self.store.get_record(self._pw, "inactive")
                    else:
                        store, their_pw = self._remote(r)
                        doc = store.get_record(their_pw, "inactive")
                except (StoreUnavailable, KeyNotFound, KeyError):
                    pending.discard(r)
                    continue
                if doc["epoch"] == epoch:
                    lists[r] = frozenset(doc["ranks"])
                    pending.discard(r)
            if not pending or waited >= timeout:
                return lists
            waited += 1
            yield "consensus"

    # -- one epoch ---------------------------------------------------------------

    def run_epoch(self, cfg: EpochConfig, ctx: EpochContext):
        st = self.state
        st.epoch = cfg.epoch
        events: list[str] = []
        sync = self.network.queues[SYNC_QUEUE]
        sync.purge()

        hb = self.heartbeat_check(ctx.heartbeat)
        if hb.newly_inactive:
            events.append("heartbeat_inactive=" + ",".join(map(str, sorted(hb.newly_inactive))))
            log.info("peer %d: no heartbeat from %s", self.rank, sorted(hb.newly_inactive))
        for _ in range(hb.ticks - 1):
            yield "probing"
        yield "heartbeat"
        active = hb.active

        self.compute_phase(cfg, ctx.executor)
        for _ in range(ctx.compute_delay(self.rank, cfg.epoch)):
            yield "computing"
        yield "compute"

        self.local_average_phase(cfg, ctx)
        yield "local_average"

        barrier = yield from sync_barrier(sync, active, ctx.barrier_timeout)
        if not barrier.complete:
            events.append("barrier_timeout=" + ",".join(map(str, sorted(barrier.missing))))
        participants = active if barrier.complete else (barrier.seen & active) | {self.rank}
        _, used, skipped = self.aggregate_phase(participants, ctx.rule)
        if skipped:
            events.append("fetch_failed=" + ",".join(map(str, skipped)))
        yield "aggregate"

        self.update_phase(ctx.training.learning_rate)
        converged = False
        if cfg.convergence_check and ctx.validation is not None:
            converged = self.check_convergence(ctx.validation, ctx.training)
            if converged:
                events.append("converged")
        yield "update"

        self.publish_inactive(cfg.epoch)
        yield "publish"
        lists = yield from self.gather_inactive_lists(active, cfg.epoch, ctx.barrier_timeout)
        consensus = consensus_inactive(lists)
        if consensus:
            events.append("consensus_inactive=" + ",".join(map(str, sorted(consensus))))
        return EpochOutcome(
            self.rank, cfg.epoch, hb, barrier, used, skipped, lists, consensus, converged, events
        )

    def finish_epoch(
        self,
        previous: EpochConfig,
        consensus: Iterable[int],
        cfg: TrainingConfig,
        joined: Iterable[int] = (),
    ) -> EpochConfig:
        """Apply the vote and any joins, then issue the next epoch's configuration."""
        consensus = frozenset(consensus)
        joined = frozenset(joined)
        st = self.state
        if consensus:
            survivors = [r for r in st.ownership if r not in consensus]
            st.ownership = redistribute(consensus, survivors, st.ownership)
            self.member.forget(consensus)
            st.inactive_local -= consensus
        if joined:
            st.ownership = admit(joined, st.ownership)
        if consensus or joined:
            self.publish_ownership()
        return trigger_next_epoch(st, previous, consensus, st.ownership, cfg, joined)
