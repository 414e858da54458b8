"""Desk-scale experiments: store data paths, scaling grid and attack resilience."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .faults import AttackSpec
from .peerstore import PeerStore, StoreAddress, external_average, external_model_update
from .scenario import DatasetSpec, Scenario, sub_rng
from .simulation import RunMetrics, run_scenario
from .tensor import TrainingConfig, partition_bounds


# -- in-store versus fetch-process-restore -----------------------------------------


@dataclass
class PathCost:
    external: int
    instore: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.instore / self.external if self.external else 0.0


@dataclass
class StoreComparison:
    model_len: int
    n_grads: int
    repetitions: int
    update: PathCost
    average: PathCost
    identical: bool
    mismatches: int = 0

    def to_dict(self) -> dict:
        return {
            "model_len": self.model_len,
            "n_grads": self.n_grads,
            "repetitions": self.repetitions,
            "update_external_bytes": self.update.external,
            "update_instore_bytes": self.update.instore,
            "update_reduction": self.update.reduction,
            "average_external_bytes": self.average.external,
            "average_instore_bytes": self.average.instore,
            "average_reduction": self.average.reduction,
            "identical": self.identical,
            "mismatches": self.mismatches,
        }


def _ledger_total(store: PeerStore) -> int:
    return store.ledger_report().total


def compare_store_paths(model_len: int, n_grads: int, repetitions: int = 100, seed: int = 0) -> StoreComparison:
    """Run the external and in-store paths on the same random tensors.

    Byte figures are per operation (averaged over ``repetitions``, which is
    exact since every repetition moves the same number of bytes). Only the
    operation itself is charged; seeding the stores is not counted.
    """
    if model_len < 1 or n_grads < 1 or repetitions < 1:
        raise ValueError("model_len, n_grads and repetitions must be >= 1")
    rng = sub_rng(seed, "store-compare")
    pw = "compare"
    keys = [f"g{i}" for i in range(n_grads)]
    costs = {"update": [0, 0], "average": [0, 0]}
    mismatches = 0
    for _ in range(repetitions):
        model = rng.normal(size=model_len)
        grads = rng.normal(size=(n_grads, model_len))
        lr = float(rng.uniform(0.01, 1.0))
        ext = PeerStore(StoreAddress("ext", 1), pw)
        ins = PeerStore(StoreAddress("ins", 1), pw)
        for st in (ext, ins):
            st.put_tensor(pw, "model", model)
            for k, g in zip(keys, grads):
                st.put_tensor(pw, k, g)

        for slot, (store, run) in enumerate(
            (
                (ext, lambda: external_average(ext, pw, keys, "avg")),
                (ins, lambda: ins.instore_average(pw, keys, "avg")),
            )
        ):
            before = _ledger_total(store)
            run()
            costs["average"][slot] += _ledger_total(store) - before
        for slot, (store, run) in enumerate(
            (
                (ext, lambda: external_model_update(ext, pw, "model", "avg", lr)),
                (ins, lambda: ins.instore_model_update(pw, "model", "avg", lr)),
            )
        ):
            before = _ledger_total(store)
            run()
            costs["update"][slot] += _ledger_total(store) - before

        for key in ("avg", "model"):
            a, b = ext.inspect(pw, key), ins.inspect(pw, key)
            if a.tobytes() != b.tobytes():
                mismatches += 1
    per = {k: PathCost(v[0] // repetitions, v[1] // repetitions) for k, v in costs.items()}
    return StoreComparison(model_len, n_grads, repetitions, per["update"], per["average"], mismatches == 0, mismatches)


# -- scaling grid --------------------------------------------------------------------


@dataclass
class ScalingRow:
    n_peers: int
    batch_size: int
    shards_per_peer: tuple[int, ...]
    gradient_computations: int
    bytes_per_epoch: int
    final_accuracy: float

    def to_dict(self) -> dict:
        return {
            "n_peers": self.n_peers,
            "batch_size": self.batch_size,
            "shards_per_peer": list(self.shards_per_peer),
            "max_shards_per_peer": max(self.shards_per_peer),
            "gradient_computations": self.gradient_computations,
            "bytes_per_epoch": self.bytes_per_epoch,
            "final_accuracy": self.final_accuracy,
        }


SCALING_COLUMNS = (
    "n_peers", "batch_size", "max_shards_per_peer", "gradient_computations", "bytes_per_epoch", "final_accuracy",
)


def scaling_base() -> Scenario:
    # 1536 training rows: divisible by every batch size and peer count in the default grid
    return Scenario(
        n_peers=4,
        name="scaling",
        dataset=DatasetSpec(n_samples=1920, val_fraction=0.2),
        training=TrainingConfig(max_epochs=3),
        crypto="fake",
    )


def scaling_study(
    peer_counts: list[int], batch_sizes: list[int], base: Scenario | None = None
) -> list[tuple[ScalingRow, RunMetrics]]:
    """Run the cross product of peer counts and batch sizes.

    Parallelism per peer is ``ceil(peer rows / batch size)``. Wall-clock
    time is replaced by shard counts and store traffic per epoch.
    """
    base = base or scaling_base()
    out = []
    for n in peer_counts:
        for b in batch_sizes:
            s = base.with_overrides(
                n_peers=n,
                training=TrainingConfig(
                    learning_rate=base.training.learning_rate,
                    batch_size=b,
                    max_epochs=base.training.max_epochs,
                    convergence_interval=base.training.convergence_interval,
                    convergence_tolerance=base.training.convergence_tolerance,
                ),
                name=f"{base.name}-p{n}-b{b}",
            )
            m = run_scenario(s)
            cfg1 = m.trace.configs[1]
            shards = tuple(cfg1[r].parallelism for r in sorted(cfg1))
            rows_total = s.dataset.n_train
            expected = tuple(
                math.ceil((hi - lo) / b) for lo, hi in (partition_bounds(rows_total, n, r) for r in range(n))
            )
            if shards != expected:
                raise RuntimeError(f"{s.name}: shard counts {shards} differ from {expected}")
            epochs = m.summary["epochs_run"]
            total_bytes = sum(v["bytes_in"] + v["bytes_out"] for v in m.ledgers.values())
            out.append(
                (
                    ScalingRow(n, b, shards, sum(shards), total_bytes // epochs, m.summary["final_accuracy"]),
                    m,
                )
            )
    return out


# -- attack resilience -------------------------------------------------------------


def attack_scenario(rule: str, attack: str = "none", *, seed: int = 0, max_epochs: int = 200, **overrides) -> Scenario:
    """Four peers, rank 3 malicious, 2000 samples in 8 dimensions."""
    spec = AttackSpec(kind=attack, epsilon=10.0, sigma=1.0, malicious_ranks=frozenset({3}) if attack != "none" else frozenset())
    s = Scenario(
        n_peers=4,
        name=f"attack-{rule}-{attack}",
        dataset=DatasetSpec(n_samples=2000, dim=8),
        training=TrainingConfig(max_epochs=max_epochs),
        rule=rule,
        byzantine_bound=1,
        attack=spec,
        crypto="fake",
        seed=seed,
    )
    return s.with_overrides(**overrides) if overrides else s


@dataclass
class AttackResult:
    rule: str
    attack: str
    final_accuracy: float
    loss_curve: list[float] = field(repr=False)
    metrics: RunMetrics | None = field(default=None, repr=False)

    @property
    def loss_non_decreasing(self) -> bool:
        """Training loss at the end is no lower than at the start."""
        return self.loss_curve[-1] >= self.loss_curve[0]

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "attack": self.attack,
            "final_accuracy": self.final_accuracy,
            "first_loss": self.loss_curve[0],
            "final_loss": self.loss_curve[-1],
            "loss_non_decreasing": self.loss_non_decreasing,
        }


def attack_study(rule: str, attack: str, *, seed: int = 0, max_epochs: int = 200) -> AttackResult:
    m = run_scenario(attack_scenario(rule, attack, seed=seed, max_epochs=max_epochs))
    honest = 0  # rank 0 is never malicious here; all peers hold the same model anyway
    curve = [r.train_loss for r in m.rows if r.peer == honest]
    return AttackResult(rule, attack, m.summary["final_accuracy"], curve, m)


def centralized_baseline(s: Scenario) -> tuple[np.ndarray, float]:
    """Training-loss curve of a single-process loop doing the same arithmetic as the Average network.

    Kept independent of the store and scheduler code paths on purpose.
    """
    from .simulation import Simulation

    sim = Simulation(s)
    owners = {r: p.state.assigned_shards for r, p in sim.peers.items()}
    w = sim.params0.flatten().copy()
    curve = []
    d = s.dataset.dim
    for _ in range(s.training.max_epochs):
        locals_ = []
        for r in sorted(owners):
            gs = []
            for sid in owners[r]:
                b = sim.catalog[sid]
                z = b.features @ w[:d] + w[d]
                err = 1.0 / (1.0 + np.exp(-z)) - b.labels
                gs.append(np.concatenate([b.features.T @ err / b.rows, [err.mean()]]))
            locals_.append(np.mean(gs, axis=0))
        w = w - s.training.learning_rate * np.mean(locals_, axis=0)
        X, y = sim.train.features, sim.train.labels
        z = X @ w[:d] + w[d]
        curve.append(float(np.mean(np.logaddexp(0, z) - y * z)))
    Xv, yv = sim.validation.features, sim.validation.labels
    acc = float(np.mean(((Xv @ w[:d] + w[d]) > 0) == (yv > 0.5)))
    return np.array(curve), acc
