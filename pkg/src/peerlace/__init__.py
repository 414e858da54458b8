"""Simulated peer-to-peer data-parallel SGD with Byzantine-robust aggregation.

Each peer owns a private tensor store, trains logistic regression on its
shards, and exchanges local gradient averages with the other peers through
their stores. Peers authenticate each other with signed announcements,
detect crashed peers by heartbeat and unanimous vote, and hand the crashed
peers' shards to the survivors.
"""

from .aggregation import RULES, AggregationRule, ZenoConfig, average, geomed, marmed, meamed, zeno
from .faults import AttackSpec, FaultEvent, FaultInjector, apply_faults, gaussian_noise, sign_flip
from .identity import Member, init_network, join_network
from .msgqueue import Queue, QueueService
from .peerstore import PeerStore, StoreAddress, TransferLedger, external_average, external_model_update
from .runtime import (
    EpochConfig,
    HeartbeatConfig,
    consensus_inactive,
    convergence_check,
    heartbeat_check,
    redistribute,
    sync_barrier,
    trigger_next_epoch,
)
from .scenario import ConfigError, DatasetSpec, Scenario, load_scenario, scenario_from_dict
from .simulation import RunMetrics, Simulation, emit, run_scenario
from .studies import attack_study, compare_store_paths, scaling_study
from .tensor import LabeledBatch, ModelParams, TrainingConfig, compute_gradient, forward_loss

__version__ = "0.1.0"

__all__ = [
    "RULES", "AggregationRule", "ZenoConfig", "average", "geomed", "marmed", "meamed", "zeno",
    "AttackSpec", "FaultEvent", "FaultInjector", "apply_faults", "gaussian_noise", "sign_flip",
    "Member", "init_network", "join_network",
    "Queue", "QueueService",
    "PeerStore", "StoreAddress", "TransferLedger", "external_average", "external_model_update",
    "EpochConfig", "HeartbeatConfig", "consensus_inactive", "convergence_check", "heartbeat_check",
    "redistribute", "sync_barrier", "trigger_next_epoch",
    "ConfigError", "DatasetSpec", "Scenario", "load_scenario", "scenario_from_dict",
    "RunMetrics", "Simulation", "emit", "run_scenario",
    "attack_study", "compare_store_paths", "scaling_study",
    "LabeledBatch", "ModelParams", "TrainingConfig", "compute_gradient", "forward_loss",
]
