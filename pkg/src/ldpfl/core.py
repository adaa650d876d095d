"""Shared value types: model vectors, the ball constraint, loss constants and
client/federation containers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

LOSS_FAMILIES = (
    "quadratic",
    "linear",
    "logistic-clipped",
    "squared-clipped",
    "absolute",
    "hinge",
    "moreau-wrapped",
)


class LDPFLError(Exception):
    """Base class for all library errors."""


class PreconditionError(LDPFLError, ValueError):
    """A formula was asked to run outside its validity range."""


class NonFiniteError(LDPFLError, ValueError):
    pass


class ConvergenceError(LDPFLError, RuntimeError):
    """An iterative solver hit its cap. ``best`` holds the best iterate seen."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def as_vector(z, d: Optional[int] = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking its length."""
    v = np.asarray(z, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite vector")
    if d is not None and v.shape[0] != d:
        raise ValueError(f"dimension mismatch: expected {d}, got {v.shape[0]}")
    return v


def project_ball(z, D: float) -> np.ndarray:
    """Euclidean projection onto the centered ball of radius D."""
    if not D > 0:
        raise PreconditionError("ball radius D must be positive")
    v = as_vector(z)
    norm = float(np.linalg.norm(v))
    if norm <= D:
        return v.copy()
    return v * (D / norm)


@dataclass(frozen=True)
class LossSpec:
    """A loss family together with its constants on the ball of radius D.

    ``beta`` is None for non-smooth families. A moreau-wrapped loss carries the
    non-smooth ``inner`` loss and its smoothing parameter in ``smoothing``.
    """

    family: str
    L: float
    D: float
    beta: Optional[float] = None
    mu: float = 0.0
    clip_threshold: Optional[float] = None
    inner: Optional["LossSpec"] = None
    smoothing: Optional[float] = None
    logit_bound: float = 15.0

    def __post_init__(self):
        if self.family not in LOSS_FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if not self.L > 0:
            raise PreconditionError("L must be positive")
        if not self.D > 0:
            raise PreconditionError("D must be positive")
        if self.mu < 0:
            raise PreconditionError("mu must be non-negative")
        if self.beta is not None and self.beta < self.mu:
            raise PreconditionError("beta must be at least mu")
        if self.clip_threshold is not None and not self.clip_threshold > 0:
            raise PreconditionError("clip threshold must be positive")
        if self.family == "moreau-wrapped":
            if self.inner is None or self.smoothing is None or not self.smoothing > 0:
                raise PreconditionError("moreau-wrapped loss needs an inner loss and smoothing > 0")

    @property
    def smooth(self) -> bool:
        return self.beta is not None


@dataclass(frozen=True)
class ClientDataset:
    """One client's samples and privacy parameters.

    ``features`` is an (n, p) array. For the quadratic family each row is a
    center c; for linear-model families it is the input a paired with
    ``labels``. ``scale`` multiplies the client's loss (used by
    :func:`apply_client_weights`).
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    eps: float = 1.0
    delta: float = 1e-6
    L: float = 1.0
    beta: Optional[float] = None
    mu: Optional[float] = None
    scale: float = 1.0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise PreconditionError("client needs at least one sample")
        if not np.all(np.isfinite(feats)):
            raise NonFiniteError("non-finite sample")
        object.__setattr__(self, "features", _frozen(feats))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if labels.shape[0] != feats.shape[0]:
                raise ValueError("labels and features disagree on sample count")
            object.__setattr__(self, "labels", _frozen(labels))
        if not self.eps > 0:
            raise PreconditionError("eps must be positive")
        if not 0 < self.delta < 1:
            raise PreconditionError("delta must lie in (0, 1)")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class FederatedDataset:
    clients: tuple
    weights: np.ndarray = field(default=None)
    d: Optional[int] = None

    def __post_init__(self):
        clients = tuple(self.clients)
        if not clients:
            raise PreconditionError("federation needs at least one client")
        object.__setattr__(self, "clients", clients)
        dims = {c.dim for c in clients}
        if len(dims) != 1:
            raise ValueError("clients disagree on dimension")
        d = dims.pop()
        if self.d is not None and self.d != d:
            raise ValueError(f"declared dimension {self.d} but samples have {d}")
        object.__setattr__(self, "d", d)
        N = len(clients)
        w = np.full(N, 1.0 / N) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (N,):
            raise ValueError("one weight per client required")
        if np.any(w < 0):
            raise PreconditionError("client weights must be non-negative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise PreconditionError("client weights must sum to 1")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def N(self) -> int:
        return len(self.clients)

    @property
    def n_min(self) -> int:
        return min(c.n for c in self.clients)

    @property
    def uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


@dataclass(frozen=True)
class RoundTranscript:
    """Everything the server received in one round."""

    round: int
    active_set: tuple
    messages: tuple

    def __post_init__(self):
        object.__setattr__(self, "active_set", tuple(int(i) for i in self.active_set))
        object.__setattr__(self, "messages", tuple(_frozen(m) for m in self.messages))
        if len(self.messages) != len(self.active_set):
            raise ValueError("one message per active client required")
        if len({m.shape for m in self.messages}) > 1:
            raise ValueError("messages disagree on dimension")

    @property
    def M_r(self) -> int:
        return len(self.active_set)


def apply_client_weights(fed: FederatedDataset) -> FederatedDataset:
    """Fold non-uniform weights p_i into the clients.

    Client i's loss is scaled by p_i N, and so are its L, beta and mu. The
    result has uniform weights and the same global objective.
    """
    w = np.asarray(fed.weights)
    if np.any(w < 0):
        raise PreconditionError("client weights must be non-negative")
    N = fed.N
    clients = []
    for p, c in zip(w, fed.clients):
        s = float(p) * N
        clients.append(
            replace(
                c,
                L=c.L * s,
                beta=None if c.beta is None else c.beta * s,
                mu=None if c.mu is None else c.mu * s,
                scale=c.scale * s,
            )
        )
    return FederatedDataset(tuple(clients), np.full(N, 1.0 / N), fed.d)


def federation(clients: Sequence[ClientDataset], weights=None) -> FederatedDataset:
    return FederatedDataset(tuple(clients), weights)
