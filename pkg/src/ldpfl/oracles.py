"""Independent brute-force and Monte-Carlo checks.

Oracles draw from their own streams (purpose ORACLE) and recompute reference
values by routes that share no code with the routine under test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from decimal import Decimal, localcontext
from typing import Optional

import numpy as np

from . import algorithms, fedsim, privacy
from .core import ClientDataset, FederatedDataset, LossSpec, PreconditionError
from .losses import (MoreauEnvelope, absolute_loss, hinge_loss, moreau_value_grad, per_sample_grads,
                     per_sample_values, quadratic_loss, squared_loss)

ENUMERATION_LIMIT = 20


@dataclass(frozen=True)
class OracleReport:
    name: str
    measured: float
    reference: float
    tolerance: float
    one_sided: bool = False
    detail: str = ""

    @property
    def passed(self) -> bool:
        if not (math.isfinite(self.measured) and math.isfinite(self.reference)):
            return False
        if self.one_sided:
            return self.measured <= self.reference + self.tolerance
        return abs(self.measured - self.reference) <= self.tolerance

    def row(self) -> list:
        return [self.name, repr(self.measured), repr(self.reference), repr(self.tolerance),
                "<=" if self.one_sided else "==", "PASS" if self.passed else "FAIL", self.detail]


REPORT_COLUMNS = ("oracle", "measured", "reference", "tolerance", "relation", "status", "detail")


# ------------------------------------------------------- subset variance

def subset_variance_closed_form(vectors, M_tilde: int) -> float:
    """(N-M)/((N-1)M) * (1/N) sum ||a_l||^2 for zero-sum a_1..a_N."""
    A = np.atleast_2d(np.asarray(vectors, dtype=float))
    n = A.shape[0]
    if not 1 <= M_tilde <= n:
        raise PreconditionError("need 1 <= M_tilde <= number of vectors")
    if n == 1:
        return 0.0
    return (n - M_tilde) / ((n - 1) * M_tilde) * float(np.mean(np.sum(A * A, axis=1)))


def _check_zero_sum(A):
    scale = max(1.0, float(np.abs(A).sum()))
    if np.abs(A.sum(axis=0)).max() > 1e-9 * scale:
        raise PreconditionError("vectors must sum to zero (recentre first)")


def subset_variance_exact(vectors, M_tilde: int) -> float:
    """Average of ||subset mean||^2 over every M_tilde-subset, by enumeration."""
    A = np.atleast_2d(np.asarray(vectors, dtype=float))
    n = A.shape[0]
    if n > ENUMERATION_LIMIT:
        raise PreconditionError(f"{n} vectors exceed the enumeration limit {ENUMERATION_LIMIT}; use Monte-Carlo path")
    if not 1 <= M_tilde <= n:
        raise PreconditionError("need 1 <= M_tilde <= number of vectors")
    _check_zero_sum(A)
    total = math.fsum(float(np.sum(A[list(s)].sum(axis=0) ** 2)) for s in itertools.combinations(range(n), M_tilde))
    return total / math.comb(n, M_tilde) / M_tilde**2


def subset_variance_mc(vectors, M_tilde: int, draws: int = 10**6, seed: int = 0, chunk: int = 20000):
    """Monte-Carlo estimate and standard error of E||subset mean||^2."""
    A = np.atleast_2d(np.asarray(vectors, dtype=float))
    n = A.shape[0]
    _check_zero_sum(A)
    rng = fedsim.stream(seed, fedsim.ORACLE, 1)
    vals = []
    left = draws
    while left > 0:
        m = min(chunk, left)
        sets = np.argsort(rng.random((m, n)), axis=1)[:, :M_tilde]
        means = A[sets].mean(axis=1)
        vals.append(np.sum(means * means, axis=1))
        left -= m
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def random_zero_sum(rng, n: int, d: int) -> np.ndarray:
    A = rng.standard_normal((n, d))
    return A - A.mean(axis=0)


def lei_report(max_n: int = 8, sets: int = 20, d: int = 3, seed: int = 0) -> OracleReport:
    rng = fedsim.stream(seed, fedsim.ORACLE, 2)
    worst = 0.0
    for n in range(1, max_n + 1):
        for _ in range(sets):
            A = random_zero_sum(rng, n, d)
            for m in range(1, n + 1):
                worst = max(worst, abs(subset_variance_exact(A, m) - subset_variance_closed_form(A, m)))
    return OracleReport("lei", worst, 0.0, 1e-12, detail=f"N<={max_n}, {sets} sets each, all M")


# ----------------------------------------------------- gradient variance

def _per_client_grads(fed, loss, w):
    return [c.scale * per_sample_grads(loss, w, c.features, c.labels) for c in fed.clients]


def gradient_variance_bound(fed: FederatedDataset, loss: LossSpec, w, K: int, sigma_sq,
                            availability: fedsim.AvailabilityModel) -> float:
    """min{Phi^2/(M'K), phi_max^2/(MK)} + (1-(M-1)/(N-1)) ups^2/M + d min{Sigma^2/M', sigma_max^2/M},
    with phi_i^2 and ups^2 evaluated at w."""
    N, d = fed.N, fed.d
    M, Mp = fedsim.availability_moments(availability)
    sig = np.broadcast_to(np.asarray(sigma_sq, dtype=float), (N,))
    phi = fedsim.sample_variances(fed, loss, w)
    ups = fedsim.heterogeneity_at(fed, loss, w)
    Phi = fedsim.top_mean_rms(phi, availability)
    Sig = fedsim.top_mean_rms(sig, availability)
    sampling = min(Phi / (Mp * K), phi.max() / (M * K))
    hetero = 0.0 if N == 1 else (1.0 - (M - 1.0) / (N - 1.0)) * ups / M
    return float(sampling + hetero + d * min(Sig / Mp, float(sig.max()) / M))


def gradient_variance_mc(fed: FederatedDataset, loss: LossSpec, w, K: int, sigma_sq,
                         availability: fedsim.AvailabilityModel, draws: int = 10**4, seed: int = 0):
    """Monte-Carlo E||g_r - grad F(w)||^2 for one round of messages at w.

    Returns (estimate, standard error).
    """
    if draws < 2:
        raise ValueError("need at least two draws")
    N, d = fed.N, fed.d
    sig = np.broadcast_to(np.asarray(sigma_sq, dtype=float), (N,))
    G = _per_client_grads(fed, loss, w)
    full = np.stack([g.mean(axis=0) for g in G]).mean(axis=0)
    rng = fedsim.stream(seed, fedsim.ORACLE, 3)
    Ks = fedsim.batch_sizes(fed, K)
    out = np.empty(draws)
    for t in range(draws):
        M_r = availability.draw(rng)
        S = rng.choice(N, size=M_r, replace=False)
        acc = np.zeros(d)
        for i in S:
            idx = rng.integers(0, len(G[i]), size=Ks[i])
            acc += G[i][idx].mean(axis=0) + math.sqrt(sig[i]) * rng.standard_normal(d)
        diff = acc / M_r - full
        out[t] = diff @ diff
    return float(out.mean()), float(out.std(ddof=1) / math.sqrt(draws))


def gradient_variance_report(name, fed, loss, w, K, sigma_sq, availability, draws=10**4, seed=0) -> OracleReport:
    est, se = gradient_variance_mc(fed, loss, w, K, sigma_sq, availability, draws, seed)
    bound = gradient_variance_bound(fed, loss, w, K, sigma_sq, availability)
    return OracleReport(name, est, bound, 3.0 * se, one_sided=True, detail=f"stderr={se:.3g}")


# ------------------------------------------------------ finite differences

def finite_diff_grad(fn_or_loss, w, x=None, h: float = 1e-6, y=None) -> np.ndarray:
    """Central differences of a scalar function, or of a loss at sample (x, y)."""
    w = np.asarray(w, dtype=float)
    if not h > 0:
        raise ValueError("h must be positive")
    if isinstance(fn_or_loss, LossSpec):
        loss = fn_or_loss
        X = np.asarray(x, dtype=float)[None, :]
        Y = None if y is None else np.array([float(y)])
        fn = lambda v: float(per_sample_values(loss, v, X, Y)[0])
    else:
        fn = fn_or_loss
    g = np.empty_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (fn(w + e) - fn(w - e)) / (2 * h)
    return g


# ---------------------------------------------------------------- stability

def quadratic_benchmark(N: int = 5, n: int = 20, d: int = 5, D: float = 5.0, seed: int = 0, spread: float = 1.0):
    """Clients with points around per-client centres and the loss 1/2 ||w - c||^2."""
    rng = fedsim.stream(seed, fedsim.ORACLE, 4)
    clients = []
    for _ in range(N):
        centre = rng.normal(0.0, spread, size=d)
        clients.append(ClientDataset(centre + rng.normal(0.0, 1.0, size=(n, d))))
    fed = FederatedDataset(tuple(clients))
    return fed, quadratic_loss(D, np.vstack([c.features for c in clients]))


def stability_experiment(fed: FederatedDataset, loss: LossSpec, eta: float, R: int, K: int, M: int,
                         seed_pairs: int = 200, seed: int = 0, replacement=None) -> OracleReport:
    """Coupled noiseless runs on datasets differing in client 0's first sample.

    Compares mean L ||w_hat - w_hat'|| with 2 L^2 R eta / (n_min M), one-sided at 3 stderr.
    """
    L = loss.L
    bound = 2.0 * L * L * R * eta / (fed.n_min * M)
    if R == 0:
        return OracleReport("stability", 0.0, bound, 0.0, one_sided=True)
    if loss.beta is not None and eta > 1.0 / loss.beta + 1e-15:
        raise PreconditionError("stability bound needs eta <= 1/beta")
    rng = fedsim.stream(seed, fedsim.ORACLE, 5)
    c0 = fed.clients[0]
    feats = np.array(c0.features)
    if replacement is None:
        replacement = feats[rng.integers(c0.n)] + rng.standard_normal(fed.d)
    feats[0] = replacement
    swapped = ClientDataset(feats, c0.labels, c0.eps, c0.delta, c0.L, c0.beta, c0.mu, c0.scale)
    fed2 = FederatedDataset((swapped,) + fed.clients[1:], fed.weights, fed.d)
    avail = fedsim.AvailabilityModel.fixed(M)
    sched = algorithms.constant_schedule(R, eta)
    gaps = []
    for p in range(seed_pairs):
        run_seed = int(rng.integers(2**62))
        a = algorithms.mbsgd_run(fed, loss, 0.0, sched, avail, run_seed, K=K, record_transcript=False,
                                 track_metrics=False)
        b = algorithms.mbsgd_run(fed2, loss, 0.0, sched, avail, run_seed, K=K, record_transcript=False,
                                 track_metrics=False)
        gaps.append(L * float(np.linalg.norm(a.w_hat - b.w_hat)))
    g = np.array(gaps)
    se = float(g.std(ddof=1) / math.sqrt(len(g))) if len(g) > 1 else 0.0
    return OracleReport("stability", float(g.mean()), bound, 3.0 * se, one_sided=True,
                        detail=f"{seed_pairs} seed pairs, stderr={se:.3g}")


# ---------------------------------------------------------- Moreau sandwich

def moreau_sandwich_report(betas=(1.0, 10.0, 100.0), points: int = 100, d: int = 4, seed: int = 0,
                           prox_tol: float = 1e-10) -> OracleReport:
    """Largest violation of 0 <= f - f_beta <= L^2/(2 beta) + 10 prox_tol."""
    rng = fedsim.stream(seed, fedsim.ORACLE, 6)
    worst = -math.inf
    for make in (absolute_loss, hinge_loss):
        X = rng.standard_normal((points, d))
        y = rng.choice([-1.0, 1.0], size=points) if make is hinge_loss else rng.standard_normal(points)
        inner = make(X, 10.0)
        for beta in betas:
            env = MoreauEnvelope(inner, beta, prox_tol=prox_tol)
            for j in range(points):
                w = rng.standard_normal(d) * 2.0
                f = float(per_sample_values(inner, w, X[j:j + 1], y[j:j + 1])[0])
                gap = f - moreau_value_grad(env, w, X[j], y[j])[0]
                upper = inner.L**2 / (2 * beta) + 10 * prox_tol
                worst = max(worst, -gap, gap - upper)
    return OracleReport("moreau-sandwich", max(0.0, worst), 0.0, 0.0, one_sided=True,
                        detail="largest violation of either side")


# -------------------------------------------------- high-precision formulas

def _dec(x) -> Decimal:
    return Decimal(repr(float(x))) if not isinstance(x, Decimal) else x


def decimal_sigma_sq(mode: str, digits: int = 40, **p) -> float:
    """Noise variances recomputed in decimal arithmetic (independent route)."""
    with localcontext() as ctx:
        ctx.prec = digits
        L = _dec(p["L"])
        if mode == "mbsgd":
            n, e, d, R = _dec(p["n"]), _dec(p["eps0"]), _dec(p["delta0"]), _dec(p["R"])
            val = 256 * L * L * R * (Decimal("2.5") * R / d).ln() * (2 / d).ln() / (n * n * e * e)
        elif mode == "onepass":
            K, e, d = _dec(p["K"]), _dec(p["eps0"]), _dec(p["delta0"])
            val = 32 * L * L * (Decimal("1.25") / d).ln() / (e * e * K * K)
        elif mode == "experiment":
            n, e, d, R = _dec(p["n"]), _dec(p["eps"]), _dec(p["delta"]), _dec(p["R"])
            val = 8 * L * L * (1 / d).ln() * R / (n * n * e * e)
        elif mode == "sdp":
            n, N, M, e, d, R = (_dec(p[k]) for k in ("n", "N", "M", "eps", "delta", "R"))
            C = 4096 * Decimal(1).exp() if "C" not in p else _dec(p["C"])
            logs = (R * M * M / (N * d)).ln() * (R / d).ln() * (1 / d).ln()
            val = C * L * L * R * M * logs / (n * n * N * N * e * e)
        else:
            raise ValueError(mode)
        return float(val)


def calibration_grid():
    """20 parameter points per plan type."""
    out = []
    for k in range(20):
        L = 0.5 + 0.25 * k
        n = 200 + 137 * k
        eps = 0.1 + 0.045 * k
        delta = 10.0 ** (-5 - (k % 4))
        R = 5 + 11 * k
        out.append(dict(L=L, n=n, eps=eps, delta=delta, R=R, K=1 + 3 * k, N=50 + 10 * k, M=1000 + 50 * k))
    return out


def calibration_report(sigma_scale: float = 1.0) -> OracleReport:
    """Largest relative gap between library noise plans and the decimal route.

    ``sigma_scale`` multiplies the library variance (fault injection).
    """
    worst = 0.0
    for p in calibration_grid():
        pairs = [
            (privacy.mbsgd_noise_plan(p["L"], p["n"], p["eps"], p["delta"], p["R"]).sigma_sq,
             decimal_sigma_sq("mbsgd", L=p["L"], n=p["n"], eps0=p["eps"], delta0=p["delta"], R=p["R"])),
            (privacy.onepass_noise_plan(p["L"], p["K"], p["eps"], p["delta"]).sigma_sq,
             decimal_sigma_sq("onepass", L=p["L"], K=p["K"], eps0=p["eps"], delta0=p["delta"])),
            (privacy.experiment_noise_plan(p["L"], p["n"], p["eps"], p["delta"], p["R"]).sigma_sq,
             decimal_sigma_sq("experiment", L=p["L"], n=p["n"], eps=p["eps"], delta=p["delta"], R=p["R"])),
            (privacy.sdp_noise_plan(p["L"], p["n"], p["N"], p["M"], p["eps"], p["delta"], p["R"]).sigma_sq,
             decimal_sigma_sq("sdp", L=p["L"], n=p["n"], N=p["N"], M=p["M"], eps=p["eps"], delta=p["delta"],
                              R=p["R"])),
        ]
        for lib, ref in pairs:
            worst = max(worst, abs(sigma_scale * lib - ref) / ref)
    return OracleReport("calibration", worst, 0.0, 1e-12, detail="4 plans x 20 grid points, relative error")


# ------------------------------------------------------------ convergence

def diagonal_quadratic(eigs, D: float, w0_component: float):
    """Single client whose squared loss equals 1/2 sum_j eig_j w_j^2."""
    eigs = np.asarray(eigs, dtype=float)
    d = len(eigs)
    A = np.diag(np.sqrt(d * eigs))
    fed = FederatedDataset((ClientDataset(A, np.zeros(d)),))
    loss = squared_loss(A, np.zeros(d), D)
    loss = LossSpec("squared-clipped", L=loss.L, D=D, beta=float(eigs.max()), mu=float(eigs.min()))
    return fed, loss, np.full(d, w0_component)


def acsa_rate_report(Rs=(8, 16, 32, 64, 128, 256), d: int = 20, beta: float = 1.0) -> OracleReport:
    """Log-log slope of the noiseless AC-SA excess risk against R."""
    eigs = beta * np.logspace(0, -6, d)
    fed, loss, w0 = diagonal_quadratic(eigs, 10.0, 1.0)
    errs = []
    for R in Rs:
        res = algorithms.acsa_run(fed, loss, None, algorithms.acsa_schedule(R, beta), 0.0, seed=0, K=d, w0=w0,
                                  mu=0.0, record_transcript=False, track_metrics=False)
        errs.append(0.5 * float(np.sum(eigs * res.w_hat**2)))
    slope = float(np.polyfit(np.log(Rs), np.log(errs), 1)[0])
    return OracleReport("acsa-rate", slope, -2.0, 0.3, detail=f"errors {['%.3g' % e for e in errs]}")


def multistage_report(kappa: float = 10.0, stages: int = 6, d: int = 10) -> OracleReport:
    """Smallest per-stage error reduction of noiseless multi-stage AC-SA (reference 1.8, one-sided)."""
    eigs = np.linspace(1.0, 1.0 / kappa, d)
    fed, loss, w0 = diagonal_quadratic(eigs, 10.0, 1.0)
    R_stage, _ = algorithms.multistage_stage_lengths(1, loss.mu, loss.beta, 0.0, 1.0)
    res = algorithms.multistage_acsa(fed, loss, None, Delta=loss.L * loss.D, V_sq=0.0, R_budget=stages * R_stage,
                                     seed=0, K=d, w0=w0, record_transcript=False, track_metrics=False)
    errs = [0.5 * float(np.sum(eigs * q**2)) for q in res.extras["stage_outputs"]]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    # report the shortfall below the required factor so that the check is one-sided
    return OracleReport("multistage", -min(ratios), -1.8, 0.0, one_sided=True,
                        detail=f"{len(ratios)} stages, reductions {['%.3g' % r for r in ratios]}")


def shuffle_scaling_report() -> OracleReport:
    """Largest deviation of eps(N)/eps(4N) from 2 for n eps0 = 0.1."""
    worst = 0.0
    for N in (1000, 4000, 16000):
        a, _ = privacy.shuffle_amplify_round(0.1, 0.0, 1, N, 1e-6)
        b, _ = privacy.shuffle_amplify_round(0.1, 0.0, 1, 4 * N, 1e-6)
        worst = max(worst, abs(a / b - 2.0))
    return OracleReport("shuffle-scaling", worst, 0.0, 0.1, one_sided=True, detail="|ratio - 2| over N in {1e3,4e3,1.6e4}")


# ------------------------------------------------------------------ suite

def _variance_configs():
    out = []
    models = {
        "fixed": fedsim.AvailabilityModel.fixed(3),
        "random": fedsim.AvailabilityModel.uniform_range(2, 5),
        "full": fedsim.AvailabilityModel.fixed(6),
    }
    for hetero, avail_kind in itertools.product((0.0, 3.0), models):
        fed, loss = quadratic_benchmark(N=6, n=30, d=3, D=20.0, seed=7, spread=hetero)
        avail = models[avail_kind]
        out.append((f"gradient-variance[{'het' if hetero else 'iid'},{avail_kind}]", fed, loss, avail))
    return out


def run_suite(only: Optional[str] = None, fault: Optional[str] = None, quick: bool = True) -> list:
    """Run the oracle suite. ``fault='sigma-half'`` halves library noise variances."""
    scale = 0.5 if fault == "sigma-half" else 1.0
    if fault not in (None, "sigma-half"):
        raise ValueError(f"unknown fault {fault!r}")

    def variance():
        reps = []
        for name, fed, loss, avail in _variance_configs():
            plan = privacy.mbsgd_noise_plan(1.0, 30, 1.0, 1e-5, 10)
            reps.append(gradient_variance_report(name, fed, loss, np.zeros(fed.d), 4, scale * plan.sigma_sq * 1e-2,
                                                 avail, draws=4000 if quick else 10**4))
        return reps

    def stability():
        fed, loss = quadratic_benchmark(N=5, n=20, d=5)
        return [stability_experiment(fed, loss, 0.5, 50, 4, 5, seed_pairs=50 if quick else 200)]

    checks: dict = {
        "lei": lambda: [lei_report()],
        "calibration": lambda: [calibration_report(scale)],
        "shuffle": lambda: [shuffle_scaling_report()],
        "acsa": lambda: [acsa_rate_report()],
        "multistage": lambda: [multistage_report()],
        "moreau": lambda: [moreau_sandwich_report(points=20 if quick else 100)],
        "stability": stability,
        "variance": variance,
    }
    if only is not None and only not in checks:
        raise ValueError(f"unknown oracle {only!r}; expected one of {sorted(checks)}")
    reports = []
    for name, fn in checks.items():
        if only is None or only == name:
            reports.extend(fn())
    return reports


SUITE_NAMES = ("lei", "calibration", "shuffle", "acsa", "multistage", "moreau", "stability", "variance")
