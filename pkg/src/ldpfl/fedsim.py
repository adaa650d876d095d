"""Round engine: client availability, local sampling, Gaussian noising, the
shuffler and transcript recording.

Randomness comes from counter-based Philox streams keyed by
(master seed, purpose, client, round), so results never depend on the order
in which client work is scheduled.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import ClientDataset, FederatedDataset, LDPFLError, LossSpec, PreconditionError, RoundTranscript
from .losses import mean_grad

WITH_REPLACEMENT = "with-replacement"
DISJOINT = "without-replacement-disjoint"
SAMPLING_MODES = (WITH_REPLACEMENT, DISJOINT)

# stream purposes
AVAILABILITY, CLIENT, SHUFFLE, ORDER, SPLIT, ORACLE = range(6)

TRANSCRIPT_HEADER = "# ldpfl-transcript v1"


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class BudgetExhausted(LDPFLError):
    pass


@dataclass(frozen=True)
class AvailabilityModel:
    """Distribution of the number of clients M_r available in a round."""

    kind: str
    values: tuple
    probs: tuple

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform-range", "categorical"):
            raise ValueError(f"unknown availability kind {self.kind!r}")
        vals = tuple(int(v) for v in self.values)
        probs = tuple(float(p) for p in self.probs)
        if not vals or len(vals) != len(probs):
            raise ValueError("availability needs matching values and probabilities")
        if min(vals) < 1:
            raise PreconditionError("available-client counts must be at least 1")
        if any(p < 0 for p in probs) or abs(math.fsum(probs) - 1.0) > 1e-12:
            raise PreconditionError("availability probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def fixed(cls, M: int):
        return cls("fixed", (M,), (1.0,))

    @classmethod
    def uniform_range(cls, lo: int, hi: int):
        if hi < lo:
            raise ValueError("empty range")
        k = hi - lo + 1
        return cls("uniform-range", tuple(range(lo, hi + 1)), (1.0 / k,) * k)

    @classmethod
    def categorical(cls, values: Sequence[int], probs: Sequence[float]):
        return cls("categorical", tuple(values), tuple(probs))

    @property
    def max_value(self) -> int:
        return max(self.values)

    def validate(self, N: int) -> None:
        if self.max_value > N:
            raise PreconditionError(f"availability allows {self.max_value} clients but N={N}")

    def draw(self, rng: np.random.Generator) -> int:
        if len(self.values) == 1:
            return self.values[0]
        return int(self.values[rng.choice(len(self.values), p=np.asarray(self.probs))])


def availability_moments(model: AvailabilityModel):
    """(M, M') with 1/M = E[1/M_r] and 1/M' = sqrt(E[1/M_r^2])."""
    inv = math.fsum(p / v for v, p in zip(model.values, model.probs))
    inv_sq = math.fsum(p / v**2 for v, p in zip(model.values, model.probs))
    return 1.0 / inv, 1.0 / math.sqrt(inv_sq)


def sample_round(rng: np.random.Generator, model: AvailabilityModel, N: int) -> np.ndarray:
    """Draw M_r, then a uniformly random M_r-subset of range(N), returned sorted."""
    model.validate(N)
    M_r = model.draw(rng)
    if M_r == N:
        return np.arange(N)
    return np.sort(rng.choice(N, size=M_r, replace=False))


def batch_sizes(fed: FederatedDataset, K: int) -> list:
    """Per-client batch sizes with K_i/n_i held equal: K_i = ceil(K n_i / n_min)."""
    n_min = fed.n_min
    return [int(math.ceil(K * c.n / n_min - 1e-9)) for c in fed.clients]


class OnePassCursor:
    """Walks a client's samples in one fixed random order, block by block."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.order = rng.permutation(n)
        self.pos = 0
        self.used = []

    def take(self, K: int) -> np.ndarray:
        if self.pos + K > len(self.order):
            raise BudgetExhausted("one-pass budget exhausted")
        block = self.order[self.pos:self.pos + K]
        self.pos += K
        self.used.append(block)
        return block


def draw_batch(rng: np.random.Generator, n: int, K: int, mode: str = WITH_REPLACEMENT,
               cursor: Optional[OnePassCursor] = None) -> np.ndarray:
    if mode == WITH_REPLACEMENT:
        return rng.integers(0, n, size=K)
    if mode == DISJOINT:
        if cursor is None:
            raise ValueError("disjoint sampling needs a cursor")
        if K > n:
            raise PreconditionError(f"batch K={K} exceeds sample count n={n}")
        return cursor.take(K)
    raise ValueError(f"unknown sampling mode {mode!r}")


def draw_noise(rng: np.random.Generator, d: int, sigma_sq: float) -> np.ndarray:
    z = rng.standard_normal(d)
    return z * math.sqrt(sigma_sq) if sigma_sq > 0 else z * 0.0


def client_message(client: ClientDataset, loss: LossSpec, w, K: int, mode: str, sigma_sq: float,
                   rng: np.random.Generator, cursor: Optional[OnePassCursor] = None) -> np.ndarray:
    """Mean gradient over K local samples plus N(0, sigma_sq I) noise.

    With replacement, K >= n means the whole local dataset (no draw).
    """
    if sigma_sq < 0:
        raise PreconditionError("sigma_sq must be non-negative")
    if mode == WITH_REPLACEMENT and K >= client.n:
        X, y = client.features, client.labels
    else:
        idx = draw_batch(rng, client.n, K, mode, cursor)
        X = client.features[idx]
        y = None if client.labels is None else client.labels[idx]
    g = client.scale * mean_grad(loss, w, X, y)
    return g + draw_noise(rng, g.shape[0], sigma_sq)


def shuffle_stage(messages: Sequence, rng: np.random.Generator) -> list:
    """Uniformly random permutation of the messages."""
    perm = rng.permutation(len(messages))
    return [messages[i] for i in perm]


def ordered_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """Map preserving input order; the result never depends on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def server_average(messages: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of messages, folded in the given (client-index) order."""
    acc = np.zeros_like(messages[0])
    for m in messages:
        acc = acc + m
    return acc / len(messages)


# --------------------------------------------------------------- aggregates

def top_mean_rms(values: Sequence[float], model: AvailabilityModel) -> float:
    """sqrt(E[(mean of the M_1 largest values)^2]) over the availability law.

    Used for Phi^2, Sigma^2, Psi and Xi.
    """
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    model.validate(len(v))
    cums = np.cumsum(v)
    second = math.fsum(p * (cums[m - 1] / m) ** 2 for m, p in zip(model.values, model.probs))
    return math.sqrt(second)


def regime(Psi: float, psi_max: float, M: float, M_prime: float):
    """(M_tilde, Psi_tilde): average-case constants when Psi/M' <= psi_max/M, else worst-case."""
    if Psi / M_prime <= psi_max / M:
        return M_prime, Psi
    return M, psi_max


def client_gradients(fed: FederatedDataset, loss: LossSpec, w) -> np.ndarray:
    """(N, d) array of exact local empirical gradients."""
    return np.stack([c.scale * mean_grad(loss, w, c.features, c.labels) for c in fed.clients])


def sample_variances(fed: FederatedDataset, loss: LossSpec, w) -> np.ndarray:
    """phi_i^2 at w: mean squared deviation of per-sample gradients from the local mean."""
    from .losses import per_sample_grads

    out = []
    for c in fed.clients:
        G = c.scale * per_sample_grads(loss, w, c.features, c.labels)
        out.append(float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1))))
    return np.array(out)


def heterogeneity_at(fed: FederatedDataset, loss: LossSpec, w) -> float:
    """(1/N) sum ||grad F_i(w) - grad F(w)||^2 at one point."""
    G = client_gradients(fed, loss, w)
    return float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))


# --------------------------------------------------------------- transcripts

def write_transcript(path, transcripts: Sequence[RoundTranscript]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(TRANSCRIPT_HEADER + "\n")
        fh.write("# round client M_r message...\n")
        for t in transcripts:
            for i, m in zip(t.active_set, t.messages):
                fh.write(" ".join([str(t.round), str(i), str(t.M_r)] + [repr(float(x)) for x in m]) + "\n")


def read_transcript(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != TRANSCRIPT_HEADER:
        raise ValueError("not a transcript file (missing version header)")
    rounds: dict = {}
    for line in lines[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        r, i = int(parts[0]), int(parts[1])
        rounds.setdefault(r, []).append((i, np.array([float(x) for x in parts[3:]])))
    return [RoundTranscript(r, [i for i, _ in rows], [m for _, m in rows]) for r, rows in sorted(rounds.items())]
