"""Dataset ingestion and federation construction: IDX parsing, PCA, the MNIST
digit-pair partition, the insurance table and heterogeneity estimates."""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ClientDataset, ConvergenceError, FederatedDataset, LDPFLError, LossSpec, PreconditionError
from .fedsim import SPLIT, stream
from .losses import mean_grad, mean_value

DATA_DIR_ENV = "LDPFL_DATA_DIR"
MNIST_IMAGES = "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = "mnist5k-labels-idx1-ubyte.gz"
INSURANCE_CSV = "insurance.csv"

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

ODD_DIGITS = (1, 3, 5, 7, 9)
EVEN_DIGITS = (0, 2, 4, 6, 8)


class ParseError(LDPFLError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DatasetMissing(LDPFLError, FileNotFoundError):
    pass


# ----------------------------------------------------------------- locations

def data_path(name: str) -> Path:
    """Resolve a dataset file: $LDPFL_DATA_DIR first, then the bundled copy."""
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        p = Path(env) / name
        if p.exists():
            return p
    bundled = resources.files("ldpfl") / "datasets" / name
    if bundled.is_file():
        return Path(str(bundled))
    where = f"${DATA_DIR_ENV}={env}" if env else "the bundled datasets"
    raise DatasetMissing(f"{name} not found in {where}; run `ldpfl ingest` or set ${DATA_DIR_ENV}")


# ----------------------------------------------------------------------- IDX

@dataclass(frozen=True)
class RawImageSet:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image and label counts disagree")
        if self.labels.size and int(self.labels.max()) > 9:
            raise ValueError("labels must lie in [0, 9]")

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX container (3-D images or 1-D labels).

    Gzip-compressed input is detected and inflated first.
    """
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise ParseError(f"corrupt gzip stream: {exc}", 0) from None
    if len(data) < 4:
        raise ParseError("truncated header", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise ParseError(f"bad magic 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError("truncated header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = math.prod(dims)
    if len(data) - header < size:
        raise ParseError(f"truncated payload: expected {size} bytes, found {len(data) - header}", len(data))
    if len(data) - header > size:
        raise ParseError("trailing bytes after payload", header + size)
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


def write_idx(array) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("IDX writer handles unsigned bytes only")
    if a.ndim == 3:
        magic = IDX_IMAGES
    elif a.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ValueError("expected a 3-D image tensor or a 1-D label array")
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes()


def load_mnist(images_path=None, labels_path=None) -> RawImageSet:
    ip = Path(images_path) if images_path else data_path(MNIST_IMAGES)
    lp = Path(labels_path) if labels_path else data_path(MNIST_LABELS)
    for p in (ip, lp):
        if not p.exists():
            raise DatasetMissing(f"{p} not found; run `ldpfl ingest` or set ${DATA_DIR_ENV}")
    images = parse_idx(ip.read_bytes())
    labels = parse_idx(lp.read_bytes())
    if images.ndim != 3 or labels.ndim != 1:
        raise ValueError("expected an image file and a label file")
    return RawImageSet(images, labels)


# ----------------------------------------------------------------------- PCA

def pca_reduce(X, d_out: int):
    """Project mean-centred rows onto the top ``d_out`` covariance eigenvectors.

    Returns (projected, basis, mean) with basis of shape (d_out, p). Each basis
    vector's largest-magnitude coordinate is made positive.
    """
    X = np.asarray(X, dtype=float)
    if not 1 <= d_out <= min(X.shape):
        raise PreconditionError(f"d_out={d_out} must lie in [1, {min(X.shape)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:d_out]
    basis = vecs[:, order].T
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(d_out), pivots])
    basis = basis * np.where(signs == 0, 1.0, signs)[:, None]
    return Xc @ basis.T, basis, mean


# ------------------------------------------------------------- federations

@dataclass(frozen=True)
class FederatedSplit:
    """Train and test federations with matching client order."""

    train: FederatedDataset
    test: FederatedDataset
    info: dict


def _split_indices(rng, n: int, test_fraction: float):
    perm = rng.permutation(n)
    k = int(round((1.0 - test_fraction) * n))
    if not 0 < k < n:
        raise PreconditionError("train/test split leaves a side empty")
    return perm[:k], perm[k:]


def _with_privacy(clients, eps: float, L: float, delta_rule=None):
    out = []
    for c in clients:
        delta = (1.0 / c.n**2) if delta_rule is None else delta_rule(c.n)
        out.append(replace(c, eps=eps, delta=delta, L=L))
    return out


def mnist_features(raw: RawImageSet, d: int = 50) -> np.ndarray:
    """Pixels scaled to [0, 1], then PCA to d dimensions."""
    X = raw.images.reshape(raw.count, -1).astype(float) / 255.0
    return pca_reduce(X, d)[0]


def partition_mnist_pairs(raw: RawImageSet, N: int = 25, heterogeneity: str = "pairs", seed: int = 0, *,
                          d: int = 50, subsample: float = 1.0, test_fraction: float = 0.2,
                          eps: float = 1.0, features: Optional[np.ndarray] = None) -> FederatedSplit:
    """One client per (odd, even) digit pair holding every image of both
    digits, labels +1 odd / -1 even.

    Pairs are trimmed (seeded) to the smallest pair size so all n_i agree.
    ``shuffled`` keeps the client sizes but deals the pooled samples out at
    random. ``subsample`` keeps that fraction of each digit (seeded). Each
    client is split train/test; L = 2 max ||x|| over all training rows and
    delta = 1/n^2 per client.
    """
    if heterogeneity not in ("pairs", "shuffled"):
        raise ValueError(f"unknown heterogeneity mode {heterogeneity!r}")
    if N != 25:
        raise PreconditionError("the digit-pair partition has exactly 25 clients")
    if not 0 < subsample <= 1:
        raise PreconditionError("subsample fraction must lie in (0, 1]")
    labels = raw.labels.astype(int)
    for digit in range(10):
        if not np.any(labels == digit):
            raise PreconditionError(f"digit {digit} missing from the image set")
    X = mnist_features(raw, d) if features is None else np.asarray(features, dtype=float)
    rng_sub = stream(seed, SPLIT, 0)
    keep = {}
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        if subsample < 1:
            idx = np.sort(rng_sub.choice(idx, size=max(1, int(round(subsample * len(idx)))), replace=False))
        keep[digit] = idx
    groups, pairs = [], []
    for a in ODD_DIGITS:
        for b in EVEN_DIGITS:
            groups.append(np.concatenate([keep[a], keep[b]]))
            pairs.append((a, b))
    # equal client sizes: trim every pair to the smallest one
    n_pair = min(len(g) for g in groups)
    rng_trim = stream(seed, SPLIT, 1)
    groups = [g if len(g) == n_pair else np.sort(rng_trim.choice(g, size=n_pair, replace=False)) for g in groups]
    if heterogeneity == "shuffled":
        pooled = stream(seed, SPLIT, 2).permutation(np.concatenate(groups))
        cuts = np.cumsum([len(g) for g in groups])[:-1]
        groups = np.split(pooled, cuts)
    rng_split = stream(seed, SPLIT, 3)
    tr_clients, te_clients = [], []
    for g in groups:
        tr, te = _split_indices(rng_split, len(g), test_fraction)
        ys = np.where(labels % 2 == 1, 1.0, -1.0)
        tr_clients.append(ClientDataset(X[g[tr]], ys[g[tr]]))
        te_clients.append(ClientDataset(X[g[te]], ys[g[te]]))
    L = 2.0 * max(float(np.linalg.norm(c.features, axis=1).max()) for c in tr_clients)
    info = {"pairs": pairs, "groups": groups, "L": L, "heterogeneity": heterogeneity}
    return FederatedSplit(FederatedDataset(tuple(_with_privacy(tr_clients, eps, L))),
                          FederatedDataset(tuple(_with_privacy(te_clients, eps, L))), info)


# ----------------------------------------------------------------- tabular

@dataclass(frozen=True)
class TabularSet:
    rows: np.ndarray
    target: np.ndarray
    feature_names: tuple

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        target = np.asarray(self.target, dtype=float).reshape(-1)
        if rows.ndim != 2 or rows.shape[0] != target.shape[0] or rows.shape[1] != len(self.feature_names):
            raise ValueError("table shape disagrees with target or feature names")
        if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(target))):
            raise ValueError("table has missing or non-finite values")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def take(self, idx) -> "TabularSet":
        return TabularSet(self.rows[idx], self.target[idx], self.feature_names)

    def column(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"no column {name!r}") from None


INSURANCE_FEATURES = ("age", "sex", "bmi", "children", "smoker", "region")
INSURANCE_TARGET = "charges"
_BINARY_CODES = {"sex": {"female": 0.0, "male": 1.0}, "smoker": {"no": 0.0, "yes": 1.0}}


def load_insurance(path=None) -> TabularSet:
    """Read the insurance CSV. sex and smoker map to {0, 1}; region maps to
    integer codes in first-appearance order."""
    p = Path(path) if path else data_path(INSURANCE_CSV)
    if not p.exists():
        raise DatasetMissing(f"{p} not found; run `ldpfl ingest` or set ${DATA_DIR_ENV}")
    with p.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(INSURANCE_FEATURES + (INSURANCE_TARGET,)) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"insurance CSV lacks columns {sorted(missing)}")
        regions: dict = {}
        rows, target = [], []
        for line, rec in enumerate(reader, start=2):
            try:
                row = []
                for name in INSURANCE_FEATURES:
                    v = rec[name].strip()
                    if name in _BINARY_CODES:
                        row.append(_BINARY_CODES[name][v.lower()])
                    elif name == "region":
                        row.append(float(regions.setdefault(v, len(regions))))
                    else:
                        row.append(float(v))
                target.append(float(rec[INSURANCE_TARGET]))
            except (KeyError, ValueError, AttributeError) as exc:
                raise ValueError(f"insurance CSV line {line}: cannot encode ({exc})") from None
            rows.append(row)
    return TabularSet(np.array(rows), np.array(target), INSURANCE_FEATURES)


def standardize(tab: TabularSet, columns: Sequence[str], reference: Optional[TabularSet] = None) -> TabularSet:
    """(x - mean)/std per column, with statistics from ``reference`` (the
    training split) when given and from ``tab`` otherwise."""
    ref = tab if reference is None else reference
    rows = tab.rows.copy()
    for name in columns:
        j = ref.column(name)
        col = ref.rows[:, j]
        sd = float(col.std())
        if not sd > 0:
            raise PreconditionError(f"column {name!r} has zero variance")
        rows[:, j] = (rows[:, j] - col.mean()) / sd
    return TabularSet(rows, tab.target, tab.feature_names)


def add_bias(tab: TabularSet) -> TabularSet:
    return TabularSet(np.hstack([tab.rows, np.ones((tab.rows.shape[0], 1))]), tab.target,
                      tab.feature_names + ("bias",))


def target_groups(n_rows: int, target, N: int) -> list:
    """Row indices by ascending target: N-1 groups of ceil(n/N), the rest last."""
    if not 1 <= N <= n_rows:
        raise PreconditionError(f"N={N} must lie in [1, {n_rows}]")
    order = np.argsort(np.asarray(target), kind="stable")
    size = math.ceil(n_rows / N)
    groups = [order[k * size:(k + 1) * size] for k in range(N - 1)]
    groups.append(order[(N - 1) * size:])
    if any(len(g) == 0 for g in groups):
        raise PreconditionError(f"N={N} leaves the last client empty")
    return groups


def partition_by_target(tab: TabularSet, N: int, eps: float = 1.0, L: float = 1.0) -> FederatedDataset:
    clients = [ClientDataset(tab.rows[g], tab.target[g], eps=eps, delta=1.0 / max(len(g), 2) ** 2, L=L)
               for g in target_groups(len(tab.target), tab.target, N)]
    return FederatedDataset(tuple(clients))


def insurance_split(N: int, seed: int = 0, *, tab: Optional[TabularSet] = None, test_fraction: float = 0.2,
                    eps: float = 1.0, L: float = 1.0) -> FederatedSplit:
    """Target-sorted clients, a seeded per-client train/test split, age and BMI
    standardised with training statistics, and a bias column."""
    tab = load_insurance() if tab is None else tab
    groups = target_groups(len(tab.target), tab.target, N)
    rng = stream(seed, SPLIT, 4)
    tr_idx, te_idx = [], []
    for g in groups:
        tr, te = _split_indices(rng, len(g), test_fraction)
        tr_idx.append(g[tr])
        te_idx.append(g[te])
    train_all = tab.take(np.concatenate(tr_idx))
    std = lambda t: add_bias(standardize(t, ("age", "bmi"), reference=train_all))
    tr_clients = [ClientDataset(*_xy(std(tab.take(i))), eps=eps, L=L) for i in tr_idx]
    te_clients = [ClientDataset(*_xy(std(tab.take(i))), eps=eps, L=L) for i in te_idx]
    info = {"train_target_mean": float(train_all.target.mean()), "groups": groups}
    return FederatedSplit(FederatedDataset(tuple(_with_privacy(tr_clients, eps, L))),
                          FederatedDataset(tuple(_with_privacy(te_clients, eps, L))), info)


def _xy(tab: TabularSet):
    return tab.rows, tab.target


# ----------------------------------------------------------- heterogeneity

def _mean_hessian(loss: LossSpec, w, X, y) -> np.ndarray:
    fam = loss.family
    if fam == "quadratic":
        return np.eye(len(w))
    if fam == "linear":
        return np.zeros((len(w), len(w)))
    if fam == "squared-clipped":
        return X.T @ X / len(X)
    if fam == "logistic-clipped":
        z = X @ w
        s = 1.0 / (1.0 + np.exp(-np.clip(y * z, -700, 700)))
        curv = np.where(np.abs(z) < loss.logit_bound, s * (1.0 - s), 0.0)
        return (X * curv[:, None]).T @ X / len(X)
    raise PreconditionError(f"{fam} loss is not twice differentiable")


def _pooled(fed, loss, w, what):
    total = 0.0
    for p, c in zip(fed.weights, fed.clients):
        if what == "value":
            total = total + p * c.scale * mean_value(loss, w, c.features, c.labels)
        elif what == "grad":
            total = total + p * c.scale * mean_grad(loss, w, c.features, c.labels)
        else:
            total = total + p * c.scale * _mean_hessian(loss, w, c.features, c.labels)
    return total


def newton_minimizer(fed: FederatedDataset, loss: LossSpec, tol: float = 1e-10, max_iter: int = 100,
                     w0=None) -> np.ndarray:
    """Damped Newton on the pooled empirical objective (no ball constraint)."""
    w = np.zeros(fed.d) if w0 is None else np.asarray(w0, dtype=float).copy()
    f = _pooled(fed, loss, w, "value")
    for _ in range(max_iter):
        g = _pooled(fed, loss, w, "grad")
        if np.linalg.norm(g) <= tol:
            return w
        H = _pooled(fed, loss, w, "hess")
        step = np.linalg.lstsq(H + 1e-12 * np.eye(fed.d), g, rcond=None)[0]
        t = 1.0
        while True:
            cand = w - t * step
            fc = _pooled(fed, loss, cand, "value")
            if fc <= f - 1e-4 * t * float(g @ step) or t < 1e-12:
                break
            t *= 0.5
        w, f = cand, fc
    g = _pooled(fed, loss, w, "grad")
    if np.linalg.norm(g) <= tol:
        return w
    raise ConvergenceError(f"Newton did not reach gradient norm {tol} in {max_iter} iterations "
                           f"(final {np.linalg.norm(g):.3e})", best=w)


def estimate_hetero(fed: FederatedDataset, loss: LossSpec, *, samples: int = 200, seed: int = 0,
                    tol: float = 1e-10, max_iter: int = 100):
    """(upsilon_star_sq, upsilon_sq_sampled).

    upsilon_star_sq averages ||grad F_i(w*)||^2 at the pooled minimiser.
    upsilon_sq_sampled is the largest client-gradient dispersion seen at
    ``samples`` uniform points of the ball, a lower estimate of the supremum.
    """
    from .fedsim import ORACLE, heterogeneity_at

    w_star = newton_minimizer(fed, loss, tol, max_iter)
    G = np.stack([c.scale * mean_grad(loss, w_star, c.features, c.labels) for c in fed.clients])
    ups_star = float(np.mean(np.sum(G * G, axis=1)))
    rng = stream(seed, ORACLE, 0)
    best = heterogeneity_at(fed, loss, w_star)
    for _ in range(samples):
        u = rng.standard_normal(fed.d)
        r = loss.D * rng.random() ** (1.0 / fed.d)
        best = max(best, heterogeneity_at(fed, loss, u / np.linalg.norm(u) * r))
    return ups_star, best
