"""Epsilon sweeps over the benchmark datasets with non-private step-size tuning.

Each trial draws a fresh train/test split. For every (epsilon, algorithm) the
step-size (and clip) grid is swept with ``reps`` repetitions per point; the
point whose repetition-averaged model has the lowest training loss is kept
and its test error recorded. Rows aggregate trials by trial index, so output
never depends on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import algorithms, data, fedsim
from .core import FederatedDataset, LossSpec, NonFiniteError, PreconditionError
from .losses import logistic_loss, quadratic_loss, squared_loss
from .privacy import delta_rule, experiment_noise_plan

DATASETS = ("mnist-pairs", "mnist-shuffled", "insurance", "synthetic-quadratic")
ALGORITHMS = ("mbsgd", "acsa", "local-sgd")
PRIVACY = ("ldp", "nonprivate")

MNIST_EPS = (0.75, 1.5, 3.0, 6.0, 12.0, 18.0)
INSURANCE_EPS = (0.125, 0.25, 0.5, 1.0, 2.0, 3.0)


def linspace_grid(lo: float, hi: float, k: int = 10) -> list:
    return [float(x) for x in np.linspace(lo, hi, k)]


def logspace_grid(lo: float, hi: float, k: int = 10) -> list:
    return [float(x) for x in np.exp(np.linspace(math.log(lo), math.log(hi), k))]


@dataclass
class ExperimentConfig:
    dataset: str = "mnist-pairs"
    N: int = 25
    M: int = 25
    R: int = 35
    eps_grid: list = field(default_factory=lambda: list(MNIST_EPS))
    delta_rule: str = "1/n^2"
    runs: list = field(default_factory=lambda: ["mbsgd:ldp", "local-sgd:ldp", "mbsgd:nonprivate"])
    step_grids: dict = field(default_factory=lambda: {
        "mbsgd": linspace_grid(math.exp(-6), 1.0),
        "acsa": linspace_grid(math.exp(-6), 1.0),
        "local-sgd": linspace_grid(math.exp(-8), math.exp(-1)),
    })
    clip_grid: list = field(default_factory=lambda: [None])
    local_steps: int = 20
    reps: int = 3
    trials: int = 10
    seed: int = 0
    D: float = 100.0
    subsample: float = 1.0
    test_fraction: float = 0.2
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        eps = list(self.eps_grid)
        if not eps or any(e <= 0 for e in eps) or any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps grid must be positive and strictly ascending")
        if self.trials < 1 or self.reps < 1:
            raise ValueError("trials and reps must be at least 1")
        if not 1 <= self.M <= self.N:
            raise ValueError("need 1 <= M <= N")
        if self.R < 1 or self.local_steps < 1:
            raise ValueError("R and local_steps must be at least 1")
        for run in self.runs:
            alg, _, priv = run.partition(":")
            if alg not in ALGORITHMS or priv not in PRIVACY:
                raise ValueError(f"bad run spec {run!r}; use <algorithm>:<ldp|nonprivate>")
            if alg not in self.step_grids:
                raise ValueError(f"no step-size grid for {alg}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name in ("mnist-pairs", "mnist-shuffled"):
            base = cls(dataset=name)
        elif name == "insurance":
            base = cls(dataset="insurance", N=5, M=5, eps_grid=list(INSURANCE_EPS), D=1e6,
                       step_grids={"mbsgd": logspace_grid(math.exp(-8), math.exp(1)),
                                   "acsa": logspace_grid(math.exp(-8), math.exp(1)),
                                   "local-sgd": logspace_grid(math.exp(-10), 1.0)},
                       clip_grid=[1e2, 1e4, 1e6, 1e8, 1e32])
        elif name == "synthetic-quadratic":
            base = cls(dataset=name, N=8, M=8, R=30, eps_grid=[0.5, 1.0, 2.0, 4.0, 8.0, 1e6], D=2.0,
                       runs=["mbsgd:ldp", "mbsgd:nonprivate"],
                       step_grids={"mbsgd": linspace_grid(0.05, 1.0, 5), "acsa": linspace_grid(0.05, 1.0, 5),
                                   "local-sgd": linspace_grid(0.01, 0.5, 5)},
                       trials=5, reps=1)
        else:
            raise ValueError(f"unknown preset {name!r}; expected one of {DATASETS}")
        return replace(base, **overrides) if overrides else base

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        base = base or cls.preset(d.get("dataset", "mnist-pairs"))
        return replace(base, **d)


# ---------------------------------------------------------------- datasets

_MNIST_CACHE: dict = {}


def _mnist_features(subsample: float):
    key = "features"
    if key not in _MNIST_CACHE:
        raw = data.load_mnist()
        _MNIST_CACHE[key] = (raw, data.mnist_features(raw))
    return _MNIST_CACHE[key]


def _synthetic_quadratic(cfg: ExperimentConfig, seed: int) -> data.FederatedSplit:
    rng = fedsim.stream(seed, fedsim.SPLIT, 9)
    clients_tr, clients_te = [], []
    for i in range(cfg.N):
        center = rng.normal(0.0, 0.3, size=5) + 0.5
        pts = center + rng.normal(0.0, 0.5, size=(50, 5))
        clients_tr.append(data.ClientDataset(pts[:40]))
        clients_te.append(data.ClientDataset(pts[40:]))
    return data.FederatedSplit(FederatedDataset(tuple(clients_tr)), FederatedDataset(tuple(clients_te)), {})


def build_split(cfg: ExperimentConfig, trial: int) -> data.FederatedSplit:
    seed = _child_seed(cfg.seed, "split", trial)
    if cfg.dataset.startswith("mnist"):
        raw, X = _mnist_features(cfg.subsample)
        mode = "pairs" if cfg.dataset == "mnist-pairs" else "shuffled"
        return data.partition_mnist_pairs(raw, cfg.N, mode, seed, subsample=cfg.subsample,
                                          test_fraction=cfg.test_fraction, features=X)
    if cfg.dataset == "insurance":
        return data.insurance_split(cfg.N, seed, test_fraction=cfg.test_fraction)
    return _synthetic_quadratic(cfg, seed)


def _loss_for(cfg: ExperimentConfig, split: data.FederatedSplit, clip) -> LossSpec:
    X = np.vstack([c.features for c in split.train.clients])
    if cfg.dataset.startswith("mnist"):
        return logistic_loss(X, cfg.D)
    if cfg.dataset == "insurance":
        y = np.concatenate([c.labels for c in split.train.clients])
        return squared_loss(X, y, cfg.D, clip_threshold=clip)
    return quadratic_loss(cfg.D, X)


def test_error(cfg: ExperimentConfig, split: data.FederatedSplit, w) -> float:
    """Misclassification rate (MNIST), relative RMSE (insurance) or mean loss."""
    X = np.vstack([c.features for c in split.test.clients])
    if cfg.dataset.startswith("mnist"):
        y = np.concatenate([c.labels for c in split.test.clients])
        return float(np.mean(np.where(X @ w >= 0, 1.0, -1.0) != y))
    if cfg.dataset == "insurance":
        y = np.concatenate([c.labels for c in split.test.clients])
        base = split.info["train_target_mean"]
        return float(math.sqrt(np.sum((y - X @ w) ** 2) / np.sum((y - base) ** 2)))
    return float(0.5 * np.mean(np.sum((X - w) ** 2, axis=1)))


# ------------------------------------------------------------------ running

def _child_seed(seed: int, *path) -> int:
    words = [int(seed)] + [int.from_bytes(p.encode(), "little") % (2**32) if isinstance(p, str) else int(p)
                           for p in path]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def _plans(cfg: ExperimentConfig, fed: FederatedDataset, loss: LossSpec, eps: float, private: bool, releases: int):
    rule = lambda n: delta_rule(cfg.delta_rule, n)
    plans = [experiment_noise_plan(loss.L, c.n, eps, rule(c.n), releases) for c in fed.clients]
    K = plans[int(np.argmin([c.n for c in fed.clients]))].K_min
    if not private:
        return None, K
    return [p.sigma_sq for p in plans], K


def single_run(cfg: ExperimentConfig, fed: FederatedDataset, loss: LossSpec, alg: str, private: bool,
               eps: float, eta: float, seed: int) -> np.ndarray:
    avail = fedsim.AvailabilityModel.fixed(cfg.M)
    if alg == "local-sgd":
        sig, K = _plans(cfg, fed, loss, eps, private, cfg.R * cfg.local_steps)
        res = algorithms.local_sgd_run(fed, loss, sig, cfg.local_steps, eta, avail, seed, R=cfg.R, K=K,
                                       record_transcript=False, track_metrics=False)
        return res.w_hat
    sig, K = _plans(cfg, fed, loss, eps, private, cfg.R)
    if alg == "mbsgd":
        sched = algorithms.constant_schedule(cfg.R, eta)
        # the experiments report the last iterate
        sched = algorithms.Schedule(sched.eta, np.eye(cfg.R)[-1] if cfg.R else sched.gamma)
        res = algorithms.mbsgd_run(fed, loss, sig, sched, avail, seed, K=K, record_transcript=False,
                                   track_metrics=False, record_history=True)
        return res.history[-1]
    sched = algorithms.acsa_schedule(cfg.R, 1.0 / (2.0 * eta))
    res = algorithms.acsa_run(fed, loss, sig, sched, 0.0, avail, seed, K=K, record_transcript=False,
                              track_metrics=False)
    return res.w_hat


def run_trial(cfg: ExperimentConfig, trial: int) -> list:
    """[(eps, run, test_error, eta, clip)] for one train/test split."""
    split = build_split(cfg, trial)
    out = []
    for ei, eps in enumerate(cfg.eps_grid):
        for ri, run in enumerate(cfg.runs):
            alg, _, priv = run.partition(":")
            best = None
            for ci, clip in enumerate(cfg.clip_grid):
                loss = _loss_for(cfg, split, clip)
                for gi, eta in enumerate(cfg.step_grids[alg]):
                    ws = []
                    for rep in range(cfg.reps):
                        seed = _child_seed(cfg.seed, "run", trial, ei, ri, ci, gi, rep)
                        try:
                            ws.append(single_run(cfg, split.train, loss, alg, priv == "ldp", eps, eta, seed))
                        except NonFiniteError:
                            ws = None
                            break
                    if ws is None:
                        continue
                    w_bar = np.mean(ws, axis=0)
                    train = algorithms.empirical_loss(split.train, loss, w_bar)
                    if math.isfinite(train) and (best is None or train < best[0]):
                        best = (train, w_bar, eta, clip)
            if best is None:
                raise PreconditionError(f"every grid point diverged for {run} at eps={eps}")
            out.append((eps, run, test_error(cfg, split, best[1]), best[2], best[3]))
    return out


def _trial_job(args):
    cfg_json, trial = args
    return run_trial(ExperimentConfig.from_dict(json.loads(cfg_json)), trial)


def run_sweep(cfg: ExperimentConfig) -> list:
    """Per-trial results, ordered by trial index."""
    jobs = [(cfg.to_json(), t) for t in range(cfg.trials)]
    if cfg.workers <= 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_trial_job, jobs))


SWEEP_COLUMNS = ("epsilon", "algorithm", "mean_test_error", "p5", "p95", "std_error", "trials")


def summarize(cfg: ExperimentConfig, per_trial: list) -> list:
    rows = []
    for ei, eps in enumerate(cfg.eps_grid):
        for ri, run in enumerate(cfg.runs):
            vals = np.array([per_trial[t][ei * len(cfg.runs) + ri][2] for t in range(len(per_trial))])
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            rows.append({"epsilon": eps, "algorithm": run, "mean_test_error": float(vals.mean()),
                         "p5": float(np.percentile(vals, 5)), "p95": float(np.percentile(vals, 95)),
                         "std_error": se, "trials": len(vals)})
    return rows


def sweep_csv(cfg: ExperimentConfig, rows: list) -> str:
    buf = io.StringIO()
    buf.write("# ldpfl sweep\n")
    # worker count does not affect results, so it stays out of the header
    header = {k: v for k, v in json.loads(cfg.to_json()).items() if k != "workers"}
    buf.write("# config " + json.dumps(header, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([repr(float(r["epsilon"])), r["algorithm"]] +
                        [repr(float(r[k])) for k in ("mean_test_error", "p5", "p95", "std_error")] + [r["trials"]])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append({"epsilon": float(rec["epsilon"]), "algorithm": rec["algorithm"],
                     "mean_test_error": float(rec["mean_test_error"]), "p5": float(rec["p5"]),
                     "p95": float(rec["p95"]), "std_error": float(rec["std_error"]), "trials": int(rec["trials"])})
    return rows


def plot_sweep(rows: list, path, title: str = "", ylabel: str = "test error") -> None:
    """Test error against epsilon per algorithm with p5-p95 bars, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "ldpfl", "svg.fonttype": "none", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        for alg in dict.fromkeys(r["algorithm"] for r in rows):
            sub = [r for r in rows if r["algorithm"] == alg]
            x = np.array([r["epsilon"] for r in sub])
            m = np.array([r["mean_test_error"] for r in sub])
            lo = m - np.array([r["p5"] for r in sub])
            hi = np.array([r["p95"] for r in sub]) - m
            ax.errorbar(x, m, yerr=np.vstack([np.maximum(lo, 0), np.maximum(hi, 0)]), marker="o", ms=3.5,
                        capsize=3, lw=1.2, label=alg.replace(":", " "))
        ax.set_xlabel(r"$\varepsilon$")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def ylabel_for(cfg: ExperimentConfig) -> str:
    return {"insurance": "relative test RMSE", "synthetic-quadratic": "test loss"}.get(cfg.dataset, "test error")
