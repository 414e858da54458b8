"""Dense-vector math and the desk-scale training task.

The model is binary logistic regression. Gradients and parameters travel
through the rest of the package as flat float64 numpy arrays; the
flattened layout is ``weights || bias``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

DenseVector = np.ndarray


class ContractViolation(ValueError):
    """Raised when an operation is called with inputs that break its contract."""


def as_vector(values, *, allow_nonfinite: bool = False) -> DenseVector:
    """Return ``values`` as a read-only 1-D float64 array."""
    v = np.array(values, dtype=np.float64, copy=True)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not allow_nonfinite and not np.all(np.isfinite(v)):
        raise ContractViolation("vector contains NaN or Inf")
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class ModelParams:
    weights: DenseVector
    bias: float

    def __post_init__(self):
        object.__setattr__(self, "weights", as_vector(self.weights))
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def dim(self) -> int:
        return self.weights.size

    def flatten(self) -> DenseVector:
        return as_vector(np.append(self.weights, self.bias))

    @classmethod
    def from_flat(cls, flat) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size < 2:
            raise ContractViolation(f"flat params need at least 2 entries, got shape {flat.shape}")
        return cls(flat[:-1], flat[-1])

    @classmethod
    def zeros(cls, dim: int) -> "ModelParams":
        return cls(np.zeros(dim), 0.0)


@dataclass(frozen=True)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractViolation(f"features must be a non-empty 2-D matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ContractViolation(f"labels shape {y.shape} does not match {x.shape[0]} rows")
        # soft targets in [0, 1] are accepted; generated data is always hard 0/1
        if not np.all((y >= 0.0) & (y <= 1.0)):
            raise ContractViolation("labels must lie in [0, 1]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.rows

    def take(self, start: int, stop: int) -> "LabeledBatch":
        return LabeledBatch(self.features[start:stop], self.labels[start:stop])


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.5
    batch_size: int = 25
    max_epochs: int = 200
    convergence_interval: int = 10
    convergence_tolerance: float = 1e-6

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractViolation("batch_size and max_epochs must be positive")
        if self.convergence_interval < 1:
            raise ContractViolation("convergence_interval must be >= 1")
        if not self.convergence_tolerance > 0:
            raise ContractViolation("convergence_tolerance must be positive")


def _check_dims(params: ModelParams, batch: LabeledBatch) -> None:
    if params.dim != batch.dim:
        raise ContractViolation(f"model dim {params.dim} != batch dim {batch.dim}")


def forward_loss(params: ModelParams, batch: LabeledBatch) -> float:
    """Mean binary cross-entropy of the sigmoid model on ``batch``."""
    _check_dims(params, batch)
    z = batch.features @ params.weights + params.bias
    # log(1 + e^z) - y*z == -log sigma(z) for y=1 and -log(1 - sigma(z)) for y=0
    losses = np.logaddexp(0.0, z) - batch.labels * z
    return float(max(np.mean(losses), 0.0))


def compute_gradient(params: ModelParams, batch: LabeledBatch) -> DenseVector:
    """Gradient of :func:`forward_loss` w.r.t. ``weights || bias``."""
    _check_dims(params, batch)
    z = batch.features @ params.weights + params.bias
    residual = expit(z) - batch.labels
    grad_w = batch.features.T @ residual / batch.rows
    return as_vector(np.append(grad_w, residual.mean()))


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return (np.asarray(features) @ params.weights + params.bias > 0.0).astype(np.float64)


def accuracy(params: ModelParams, batch: LabeledBatch) -> float:
    _check_dims(params, batch)
    return float(np.mean(predict(params, batch.features) == batch.labels))


def sgd_step(params: ModelParams, grad, learning_rate: float) -> ModelParams:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.dim + 1,):
        raise ContractViolation(
            f"gradient length {grad.size} != weights length {params.dim} + 1"
        )
    return ModelParams(
        params.weights - learning_rate * grad[:-1],
        params.bias - learning_rate * grad[-1],
    )


def partition_bounds(rows: int, n_peers: int, rank: int) -> tuple[int, int]:
    """Row range ``[start, stop)`` owned by ``rank``; the first ``rows % n_peers`` ranks get one extra row."""
    if n_peers < 1:
        raise ContractViolation("n_peers must be positive")
    if not 0 <= rank < n_peers:
        raise ContractViolation(f"rank {rank} outside [0, {n_peers})")
    if rows < n_peers:
        raise ContractViolation(f"cannot split {rows} rows over {n_peers} peers")
    base, extra = divmod(rows, n_peers)
    start = rank * base + min(rank, extra)
    return start, start + base + (1 if rank < extra else 0)


def partition_dataset(data: LabeledBatch, n_peers: int, rank: int) -> LabeledBatch:
    start, stop = partition_bounds(data.rows, n_peers, rank)
    return data.take(start, stop)


def shard(peer_data: LabeledBatch, batch_size: int) -> list[LabeledBatch]:
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    return [peer_data.take(i, i + batch_size) for i in range(0, peer_data.rows, batch_size)]


def make_two_gaussians(
    n_samples: int, dim: int, separation: float, rng: np.random.Generator
) -> LabeledBatch:
    """Two unit-variance Gaussian classes whose means sit ``separation`` apart.

    The Bayes accuracy is ``Phi(separation / 2)``.
    """
    if n_samples < 1 or dim < 1:
        raise ContractViolation("n_samples and dim must be positive")
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=n_samples).astype(np.float64)
    signs = 2.0 * labels - 1.0
    features = rng.standard_normal((n_samples, dim)) + np.outer(signs, direction) * (separation / 2.0)
    return LabeledBatch(features, labels)
