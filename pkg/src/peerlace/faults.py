"""Fault injection and Byzantine gradient attacks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import ContractViolation, DenseVector, as_vector

CRASH = "crash"
JOIN = "join"
POST_HEARTBEAT = "post_heartbeat"
EPOCH_START = "epoch_start"


class FaultConfigError(ValueError):
    pass


def sign_flip(g, epsilon: float) -> DenseVector:
    """Invert and amplify: ``-epsilon * g``."""
    if not epsilon > 0:
        raise ContractViolation("sign-flip epsilon must be positive")
    return as_vector(-epsilon * np.asarray(g, dtype=np.float64), allow_nonfinite=True)


def gaussian_noise(g, sigma: float, rng: np.random.Generator) -> DenseVector:
    if sigma < 0:
        raise ContractViolation("noise sigma must be non-negative")
    g = np.asarray(g, dtype=np.float64)
    return as_vector(g + rng.normal(0.0, sigma, size=g.shape), allow_nonfinite=True)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    epsilon: float = 10.0
    sigma: float = 1.0
    malicious_ranks: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.kind not in ("none", "signflip", "noise"):
            raise FaultConfigError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "malicious_ranks", frozenset(self.malicious_ranks))
        if self.kind == "signflip" and not self.epsilon > 0:
            raise FaultConfigError("sign-flip epsilon must be positive")
        if self.kind == "noise" and self.sigma < 0:
            raise FaultConfigError("noise sigma must be non-negative")

    def targets(self, rank: int) -> bool:
        return self.kind != "none" and rank in self.malicious_ranks

    def apply(self, g, rng: np.random.Generator) -> DenseVector:
        if self.kind == "signflip":
            return sign_flip(g, self.epsilon)
        if self.kind == "noise":
            return gaussian_noise(g, self.sigma, rng)
        return as_vector(g, allow_nonfinite=True)


@dataclass(frozen=True)
class FaultEvent:
    kind: str
    rank: int
    at_epoch: int
    timing: str = POST_HEARTBEAT

    def __post_init__(self):
        if self.kind not in (CRASH, JOIN):
            raise FaultConfigError(f"unknown fault kind {self.kind!r}")
        if self.at_epoch < 1:
            raise FaultConfigError("at_epoch must be >= 1")
        if self.timing not in (POST_HEARTBEAT, EPOCH_START):
            raise FaultConfigError(f"unknown fault timing {self.timing!r}")


class FaultInjector:
    """Holds a validated fault schedule and answers the simulator's timing queries.

    Crashes fire at epoch start or right after the victim passes its
    heartbeat; joins run after epoch ``at_epoch`` completes.
    """

    def __init__(self, schedule: Iterable[FaultEvent], initial_ranks: Iterable[int]):
        self.schedule = tuple(schedule)
        known = set(initial_ranks)
        for ev in sorted(self.schedule, key=lambda e: e.at_epoch):
            if ev.kind == JOIN:
                if ev.rank in known:
                    raise FaultConfigError(f"join of rank {ev.rank} collides with an existing rank")
                known.add(ev.rank)
        for ev in self.schedule:
            if ev.kind == CRASH and ev.rank not in known:
                raise FaultConfigError(f"crash scheduled for unknown rank {ev.rank}")

    def crashes(self, epoch: int, timing: str) -> list[int]:
        return sorted(e.rank for e in self.schedule if e.kind == CRASH and e.at_epoch == epoch and e.timing == timing)

    def joins_after(self, epoch: int) -> list[int]:
        return sorted(e.rank for e in self.schedule if e.kind == JOIN and e.at_epoch == epoch)


def apply_faults(schedule: Iterable[FaultEvent], sim) -> FaultInjector:
    """Validate ``schedule`` against ``sim``'s peers and install it."""
    injector = FaultInjector(schedule, sim.initial_ranks)
    sim.injector = injector
    return injector
