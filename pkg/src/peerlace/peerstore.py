"""In-memory per-peer tensor store with password-gated access and byte accounting.

Stands in for a peer's Redis/RedisAI instance. Every operation that moves
tensor data between the peer's runtime and the store is charged to a
:class:`TransferLedger` at ``bytes_per_float`` bytes per coordinate.
In-store operations (averaging, model update) are charged a flat
``command_overhead`` instead, since the tensors never leave the store.
"""

from __future__ import annotations

import copy
import hmac
import json
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import average
from .tensor import ContractViolation, DenseVector, as_vector

BYTES_PER_FLOAT = 8
COMMAND_OVERHEAD = 64


class StoreError(Exception):
    pass


class AuthError(StoreError):
    pass


class KeyNotFound(StoreError, KeyError):
    pass


class StoreUnavailable(StoreError):
    """The store does not answer; its host has crashed."""


@dataclass
class OpStats:
    bytes_in: int = 0
    bytes_out: int = 0
    calls: int = 0


@dataclass
class TransferLedger:
    bytes_in: int = 0
    bytes_out: int = 0
    per_op: dict[str, OpStats] = field(default_factory=dict)

    def charge(self, op: str, bytes_in: int = 0, bytes_out: int = 0) -> None:
        stats = self.per_op.setdefault(op, OpStats())
        stats.bytes_in += bytes_in
        stats.bytes_out += bytes_out
        stats.calls += 1
        self.bytes_in += bytes_in
        self.bytes_out += bytes_out

    @property
    def total(self) -> int:
        return self.bytes_in + self.bytes_out

    def to_dict(self) -> dict:
        return {
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "per_op": {
                op: {"bytes_in": s.bytes_in, "bytes_out": s.bytes_out, "calls": s.calls}
                for op, s in sorted(self.per_op.items())
            },
        }


@dataclass(frozen=True)
class StoreAddress:
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


class PeerStore:
    """Thread-safe key-value store for tensors plus small JSON records.

    Each public operation runs under one lock together with its ledger
    update, so operations are linearizable and the ledger never reflects a
    half-applied operation.
    """

    def __init__(
        self,
        address: StoreAddress,
        password: str,
        *,
        bytes_per_float: int = BYTES_PER_FLOAT,
        command_overhead: int = COMMAND_OVERHEAD,
    ):
        self.address = address
        self._password = password
        self.bytes_per_float = bytes_per_float
        self.command_overhead = command_overhead
        self._tensors: dict[str, DenseVector] = {}
        self._records: dict[str, str] = {}
        self._ledger = TransferLedger()
        self._lock = threading.RLock()
        self._crashed = False

    def __repr__(self) -> str:
        return f"PeerStore({self.address}, keys={len(self._tensors)})"

    # -- fault hooks ---------------------------------------------------------

    def crash(self) -> None:
        with self._lock:
            self._crashed = True

    @property
    def crashed(self) -> bool:
        return self._crashed

    def ping(self) -> bool:
        """Reachability probe; a crashed store simply does not answer."""
        with self._lock:
            if self._crashed:
                return False
            self._ledger.charge("ping")
            return True

    # -- internals -----------------------------------------------------------

    def _enter(self, password: str) -> None:
        if self._crashed:
            raise StoreUnavailable(f"store {self.address} is unreachable")
        if not hmac.compare_digest(password.encode(), self._password.encode()):
            raise AuthError(f"wrong password for store {self.address}")

    def _nbytes(self, v: np.ndarray) -> int:
        return self.bytes_per_float * int(v.size)

    def _lookup(self, key: str) -> DenseVector:
        try:
            return self._tensors[key]
        except KeyError:
            raise KeyNotFound(f"no tensor {key!r} in store {self.address}") from None

    # -- tensor transfer -----------------------------------------------------

    def put_tensor(self, password: str, key: str, v) -> None:
        with self._lock:
            self._enter(password)
            v = as_vector(v, allow_nonfinite=True)
            self._tensors[key] = v
            self._ledger.charge("put_tensor", bytes_in=self._nbytes(v))

    def get_tensor(self, password: str, key: str) -> DenseVector:
        with self._lock:
            self._enter(password)
            v = self._lookup(key)
            self._ledger.charge("get_tensor", bytes_out=self._nbytes(v))
            return v

    def has_tensor(self, password: str, key: str) -> bool:
        with self._lock:
            self._enter(password)
            return key in self._tensors

    def delete_tensors(self, password: str, prefix: str) -> int:
        with self._lock:
            self._enter(password)
            doomed = [k for k in self._tensors if k.startswith(prefix)]
            for k in doomed:
                del self._tensors[k]
            if doomed:
                self._ledger.charge("delete", bytes_in=self.command_overhead)
            return len(doomed)

    def reference(self, password: str, key: str) -> DenseVector:
        """In-store handle to a tensor for a program running beside the store; moves no bytes."""
        with self._lock:
            self._enter(password)
            v = self._lookup(key)
            self._ledger.charge("reference")
            return v

    def inspect(self, password: str, key: str) -> DenseVector:
        """Read without charging the ledger. For metrics collection only."""
        with self._lock:
            self._enter(password)
            return self._lookup(key)

    # -- in-store programs ---------------------------------------------------

    def _gather(self, keys: Sequence[str]) -> list[DenseVector]:
        if len(keys) == 0:
            raise ContractViolation("no keys given")
        vectors = [self._lookup(k) for k in keys]
        if len({v.size for v in vectors}) != 1:
            raise ContractViolation("tensors under the given keys differ in length")
        return vectors

    def instore_average(self, password: str, keys: Sequence[str], out_key: str) -> None:
        with self._lock:
            self._enter(password)
            self._tensors[out_key] = average(self._gather(keys))
            self._ledger.charge("instore_average", bytes_in=self.command_overhead)

    def instore_model_update(self, password: str, model_key: str, grad_key: str, learning_rate: float) -> None:
        with self._lock:
            self._enter(password)
            model, grad = self._gather([model_key, grad_key])
            self._tensors[model_key] = as_vector(model - learning_rate * grad, allow_nonfinite=True)
            self._ledger.charge("instore_model_update", bytes_in=self.command_overhead)

    # -- small records -------------------------------------------------------

    def put_record(self, password: str, key: str, record) -> None:
        payload = json.dumps(record, sort_keys=True)
        with self._lock:
            self._enter(password)
            self._records[key] = payload
            self._ledger.charge("put_record", bytes_in=len(payload.encode()))

    def get_record(self, password: str, key: str):
        with self._lock:
            self._enter(password)
            try:
                payload = self._records[key]
            except KeyError:
                raise KeyNotFound(f"no record {key!r} in store {self.address}") from None
            self._ledger.charge("get_record", bytes_out=len(payload.encode()))
        return json.loads(payload)

    def record_keys(self, password: str, prefix: str = "") -> list[str]:
        with self._lock:
            self._enter(password)
            return sorted(k for k in self._records if k.startswith(prefix))

    # -- ledger --------------------------------------------------------------

    def ledger_report(self) -> TransferLedger:
        with self._lock:
            return copy.deepcopy(self._ledger)


def external_average(store: PeerStore, password: str, keys: Sequence[str], out_key: str) -> None:
    """Fetch-process-restore baseline for :meth:`PeerStore.instore_average`."""
    if len(keys) == 0:
        raise ContractViolation("no keys given")
    fetched = [store.get_tensor(password, k) for k in keys]
    if len({v.size for v in fetched}) != 1:
        raise ContractViolation("tensors under the given keys differ in length")
    store.put_tensor(password, out_key, average(fetched))


def external_model_update(
    store: PeerStore, password: str, model_key: str, grad_key: str, learning_rate: float
) -> None:
    """Fetch-process-restore baseline for :meth:`PeerStore.instore_model_update`."""
    model = store.get_tensor(password, model_key)
    grad = store.get_tensor(password, grad_key)
    if model.size != grad.size:
        raise ContractViolation("model and gradient differ in length")
    store.put_tensor(password, model_key, model - learning_rate * grad)
