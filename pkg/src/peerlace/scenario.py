"""Scenario files: schema, validation and seed derivation.

A scenario is a JSON document; unknown fields are rejected. Example::

    {
      "n_peers": 4,
      "dataset": {"n_samples": 2000, "dim": 8, "separation": 4.0, "val_fraction": 0.2},
      "training": {"learning_rate": 0.5, "batch_size": 25, "max_epochs": 200},
      "aggregation": {"rule": "meamed", "byzantine_bound": 1},
      "attack": {"kind": "signflip", "epsilon": 10.0, "malicious_ranks": [3]},
      "faults": [{"kind": "crash", "rank": 2, "at_epoch": 2, "timing": "post_heartbeat"}],
      "seed": 7
    }

Every random draw in a run comes from a generator returned by
:func:`sub_rng`, keyed by the master seed and a label, so results do not
depend on the order in which peers happen to be scheduled.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .aggregation import RULES
from .faults import AttackSpec, FaultConfigError, FaultEvent
from .runtime import HeartbeatConfig
from .tensor import ContractViolation, TrainingConfig, partition_bounds

SEED_ENV = "PEERLACE_SEED"


class ConfigError(ValueError):
    pass


def _obj(properties: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_nonneg_num = {"type": "number", "minimum": 0}

SCENARIO_SCHEMA = _obj(
    {
        "name": {"type": "string"},
        "n_peers": _pos_int,
        "dataset": _obj(
            {
                "n_samples": _pos_int,
                "dim": {"type": "integer", "minimum": 1, "maximum": 32},
                "separation": _nonneg_num,
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "zeno_samples": _pos_int,
            }
        ),
        "training": _obj(
            {
                "learning_rate": _pos_num,
                "batch_size": _pos_int,
                "max_epochs": _pos_int,
                "convergence_interval": _pos_int,
                "convergence_tolerance": _pos_num,
                "stop_on_convergence": {"type": "boolean"},
                "init_scale": _nonneg_num,
            }
        ),
        "aggregation": _obj(
            {
                "rule": {"enum": list(RULES)},
                "byzantine_bound": _nonneg_int,
                "geomed_tolerance": _pos_num,
                "geomed_max_iter": _pos_int,
                "zeno_rho": _nonneg_num,
            }
        ),
        "attack": _obj(
            {
                "kind": {"enum": ["none", "signflip", "noise"]},
                "epsilon": _pos_num,
                "sigma": _nonneg_num,
                "malicious_ranks": {"type": "array", "items": _nonneg_int, "uniqueItems": True},
            }
        ),
        "faults": {
            "type": "array",
            "items": _obj(
                {
                    "kind": {"enum": ["crash", "join"]},
                    "rank": _nonneg_int,
                    "at_epoch": _pos_int,
                    "timing": {"enum": ["post_heartbeat", "epoch_start"]},
                },
                required=("kind", "rank", "at_epoch"),
            ),
        },
        "heartbeat": _obj({"timeout": _pos_int, "trials": _pos_int}),
        "barrier_timeout": _pos_int,
        "store": _obj({"bytes_per_float": _pos_int, "command_overhead": _nonneg_int}),
        "schedule": _obj({"order": {"enum": ["rank", "random"]}, "max_compute_delay": _nonneg_int}),
        "crypto": {"enum": ["rsa", "fake"]},
        "seed": _nonneg_int,
        "mode": {"enum": ["deterministic", "concurrent"]},
    },
    required=("n_peers",),
)


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 2000
    dim: int = 8
    separation: float = 4.0
    val_fraction: float = 0.2
    zeno_samples: int = 64

    @property
    def n_train(self) -> int:
        return self.n_samples - int(round(self.n_samples * self.val_fraction))


@dataclass(frozen=True)
class Scenario:
    n_peers: int
    name: str = "scenario"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    stop_on_convergence: bool = False
    init_scale: float = 0.01
    rule: str = "average"
    byzantine_bound: int = 1
    geomed_tolerance: float = 1e-8
    geomed_max_iter: int = 200
    zeno_rho: float = 1e-4
    attack: AttackSpec = field(default_factory=AttackSpec)
    faults: tuple[FaultEvent, ...] = ()
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    barrier_timeout: int = 100
    bytes_per_float: int = 8
    command_overhead: int = 64
    order: str = "rank"
    max_compute_delay: int = 0
    crypto: str = "rsa"
    seed: int = 0
    mode: str = "deterministic"

    def with_overrides(self, **changes) -> "Scenario":
        new = dataclasses.replace(self, **changes)
        validate(new)
        return new

    def to_json(self) -> dict:
        t = self.training
        return {
            "name": self.name,
            "n_peers": self.n_peers,
            "dataset": {
                "n_samples": self.dataset.n_samples,
                "dim": self.dataset.dim,
                "separation": self.dataset.separation,
                "val_fraction": self.dataset.val_fraction,
                "zeno_samples": self.dataset.zeno_samples,
            },
            "training": {
                "learning_rate": t.learning_rate,
                "batch_size": t.batch_size,
                "max_epochs": t.max_epochs,
                "convergence_interval": t.convergence_interval,
                "convergence_tolerance": t.convergence_tolerance,
                "stop_on_convergence": self.stop_on_convergence,
                "init_scale": self.init_scale,
            },
            "aggregation": {
                "rule": self.rule,
                "byzantine_bound": self.byzantine_bound,
                "geomed_tolerance": self.geomed_tolerance,
                "geomed_max_iter": self.geomed_max_iter,
                "zeno_rho": self.zeno_rho,
            },
            "attack": {
                "kind": self.attack.kind,
                "epsilon": self.attack.epsilon,
                "sigma": self.attack.sigma,
                "malicious_ranks": sorted(self.attack.malicious_ranks),
            },
            "faults": [
                {"kind": f.kind, "rank": f.rank, "at_epoch": f.at_epoch, "timing": f.timing} for f in self.faults
            ],
            "heartbeat": {"timeout": self.heartbeat.timeout, "trials": self.heartbeat.trials},
            "barrier_timeout": self.barrier_timeout,
            "store": {"bytes_per_float": self.bytes_per_float, "command_overhead": self.command_overhead},
            "schedule": {"order": self.order, "max_compute_delay": self.max_compute_delay},
            "crypto": self.crypto,
            "seed": self.seed,
            "mode": self.mode,
        }


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"invalid scenario at {where}: {exc.message}") from None
    doc = copy.deepcopy(doc)
    ds, tr, ag = doc.get("dataset", {}), doc.get("training", {}), doc.get("aggregation", {})
    at, hb, st, sc = doc.get("attack", {}), doc.get("heartbeat", {}), doc.get("store", {}), doc.get("schedule", {})
    try:
        dataset = DatasetSpec(**ds)
        training = TrainingConfig(
            **{k: v for k, v in tr.items() if k not in ("stop_on_convergence", "init_scale")}
        )
        attack = AttackSpec(
            kind=at.get("kind", "none"),
            epsilon=at.get("epsilon", 10.0),
            sigma=at.get("sigma", 1.0),
            malicious_ranks=frozenset(at.get("malicious_ranks", ())),
        )
        faults = tuple(FaultEvent(f["kind"], f["rank"], f["at_epoch"], f.get("timing", "post_heartbeat")) for f in doc.get("faults", ()))
        scenario = Scenario(
            n_peers=doc["n_peers"],
            name=doc.get("name", "scenario"),
            dataset=dataset,
            training=training,
            stop_on_convergence=tr.get("stop_on_convergence", False),
            init_scale=tr.get("init_scale", 0.01),
            rule=ag.get("rule", "average"),
            byzantine_bound=ag.get("byzantine_bound", 1),
            geomed_tolerance=ag.get("geomed_tolerance", 1e-8),
            geomed_max_iter=ag.get("geomed_max_iter", 200),
            zeno_rho=ag.get("zeno_rho", 1e-4),
            attack=attack,
            faults=faults,
            heartbeat=HeartbeatConfig(**hb),
            barrier_timeout=doc.get("barrier_timeout", 100),
            bytes_per_float=st.get("bytes_per_float", 8),
            command_overhead=st.get("command_overhead", 64),
            order=sc.get("order", "rank"),
            max_compute_delay=sc.get("max_compute_delay", 0),
            crypto=doc.get("crypto", "rsa"),
            seed=doc.get("seed", 0),
            mode=doc.get("mode", "deterministic"),
        )
    except (ContractViolation, FaultConfigError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    validate(scenario)
    return scenario


def validate(s: Scenario) -> None:
    """Cross-field checks the schema cannot express."""
    ranks = set(range(s.n_peers))
    if s.n_peers < 1:
        raise ConfigError("n_peers must be at least 1")
    if s.dataset.n_train < s.n_peers:
        raise ConfigError(f"{s.dataset.n_train} training rows cannot be split over {s.n_peers} peers")
    if s.dataset.n_samples - s.dataset.n_train < 1:
        raise ConfigError("validation split is empty")
    if not s.attack.malicious_ranks <= ranks:
        raise ConfigError(f"malicious ranks {sorted(s.attack.malicious_ranks - ranks)} are not peers")
    if s.attack.kind != "none" and not s.attack.malicious_ranks:
        raise ConfigError("an attack needs at least one malicious rank")
    if s.rule in ("meamed", "zeno") and s.byzantine_bound >= s.n_peers:
        raise ConfigError(f"byzantine_bound {s.byzantine_bound} must be below n_peers {s.n_peers}")
    join_list = [f.rank for f in s.faults if f.kind == "join"]
    joins = set(join_list)
    if len(joins) != len(join_list):
        raise ConfigError("a rank can join only once")
    if joins & ranks:
        raise ConfigError(f"join ranks {sorted(joins & ranks)} collide with initial peers")
    join_epoch = {f.rank: f.at_epoch for f in s.faults if f.kind == "join"}
    for f in s.faults:
        if f.kind == "crash" and f.rank in join_epoch and f.at_epoch <= join_epoch[f.rank]:
            raise ConfigError(f"rank {f.rank} is crashed at epoch {f.at_epoch}, before it joins after epoch {join_epoch[f.rank]}")
    if s.max_compute_delay >= s.barrier_timeout:
        raise ConfigError("max_compute_delay must be below barrier_timeout, or live peers miss the barrier")
    total_shards = sum(
        math.ceil((hi - lo) / s.training.batch_size)
        for lo, hi in (partition_bounds(s.dataset.n_train, s.n_peers, r) for r in range(s.n_peers))
    )
    if total_shards < s.n_peers + len(joins):
        raise ConfigError(f"{total_shards} shards cannot give each of {s.n_peers + len(joins)} peers at least one")
    crashes = {f.rank for f in s.faults if f.kind == "crash"}
    if not crashes <= ranks | joins:
        raise ConfigError(f"crash scheduled for unknown ranks {sorted(crashes - ranks - joins)}")
    if crashes >= ranks | joins and crashes:
        raise ConfigError("the fault schedule crashes every peer")


def load_scenario(path: str | Path, seed: int | None = None, mode: str | None = None, env=None) -> Scenario:
    """Read a scenario file. ``PEERLACE_SEED`` in ``env`` overrides the file's seed; ``seed`` overrides both."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    env = {} if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if seed is not None:
        doc["seed"] = seed
    if mode is not None:
        doc["mode"] = mode
    return scenario_from_dict(doc)


def sub_seed(master: int, *label) -> int:
    """Derive an independent 64-bit seed from the master seed and a label path."""
    text = "|".join([str(master), *map(str, label)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def sub_rng(master: int, *label) -> np.random.Generator:
    return np.random.default_rng(sub_seed(master, *label))
