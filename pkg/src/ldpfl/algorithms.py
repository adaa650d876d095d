"""Optimization drivers (noisy minibatch SGD, accelerated AC-SA, the
multi-stage and one-pass variants, a Local SGD baseline) and their step-size,
averaging and round-count schedules."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import fedsim
from .core import FederatedDataset, LossSpec, PreconditionError, RoundTranscript, as_vector, project_ball
from .losses import batched_mean_grad, mean_grad, mean_value
from .privacy import NoisePlan, PrivacyLedger, mbsgd_ledger, onepass_noise_plan


# ------------------------------------------------------------------ schedules

@dataclass(frozen=True)
class Schedule:
    eta: np.ndarray
    gamma: np.ndarray
    alpha: Optional[np.ndarray] = None

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        if eta.shape != gamma.shape or eta.ndim != 1:
            raise ValueError("eta and gamma must be 1-D arrays of equal length")
        if np.any(eta <= 0):
            raise PreconditionError("step sizes must be positive")
        if np.any(gamma < 0) or (len(gamma) and gamma.sum() <= 0):
            raise PreconditionError("averaging weights must be non-negative with positive sum")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "gamma", gamma)
        if self.alpha is not None:
            alpha = np.asarray(self.alpha, dtype=float)
            if alpha.shape != eta.shape:
                raise ValueError("alpha must match eta in length")
            if len(alpha) and alpha[0] != 1.0:
                raise PreconditionError("alpha_1 must equal 1")
            if np.any((alpha[1:] <= 0) | (alpha[1:] >= 1)):
                raise PreconditionError("alpha_r must lie in (0, 1) for r >= 2")
            object.__setattr__(self, "alpha", alpha)

    @property
    def R(self) -> int:
        return len(self.eta)


def constant_schedule(R: int, eta: float) -> Schedule:
    return Schedule(np.full(R, float(eta)), np.full(R, 1.0 / max(R, 1)))


def stich_stepsize(a: float, g: float, r0: float, T: int, c: float) -> float:
    """eta = min{1/g, ln(max{2, a^2 r0 T^2 / c}) / (a T)}."""
    if min(a, g, T) <= 0:
        raise PreconditionError("a, g and T must be positive")
    ratio = math.inf if c <= 0 else a * a * r0 * T * T / c
    return min(1.0 / g, math.log(max(2.0, ratio)) / (a * T))


SCHEDULE_CASES = ("convex-sco", "convex-erm", "sc-sco", "sc-erm")


def mbsgd_schedule(case: str, **c) -> Schedule:
    """Step sizes, averaging weights and round count for noisy minibatch SGD.

    Convex cases need L, beta, D, d, n_min, M_tilde, Psi_tilde, K.
    Strongly convex cases need L, beta, mu, D, d, M, M_prime, K, Psi, psi_max,
    and the noise aggregates Sigma_sq, sigma_sq_max. ``R`` may be passed to
    override the prescribed round count.
    """
    def need(*names):
        missing = [k for k in names if k not in c]
        if missing:
            raise PreconditionError(f"{case}: missing constants {missing}")

    if case in ("convex-sco", "convex-erm"):
        need("L", "beta", "D", "d", "n_min", "M_tilde", "Psi_tilde", "K")
        L, beta, D, d = c["L"], c["beta"], c["D"], c["d"]
        Mt, n_min, K = c["M_tilde"], c["n_min"], c["K"]
        dXi = d * c["Psi_tilde"] / L**2
        R = c.get("R") or _ceil1(max(beta * D * math.sqrt(Mt) / L * min(math.sqrt(n_min), 1.0 / math.sqrt(dXi)),
                                     min(n_min, 1.0 / dXi) / K))
        eta_tilde = D * math.sqrt(Mt) / (L * R) * min(math.sqrt(n_min), L / math.sqrt(d * c["Psi_tilde"]))
        eta = min(1.0 / (4.0 * beta), eta_tilde)
        return Schedule(np.full(R, eta), np.full(R, 1.0 / R))
    if case in ("sc-sco", "sc-erm"):
        need("L", "beta", "mu", "D", "d", "M", "M_prime", "K", "Psi", "psi_max", "Sigma_sq", "sigma_sq_max")
        L, beta, mu, D, d = c["L"], c["beta"], c["mu"], c["D"], c["d"]
        M, Mp, K = c["M"], c["M_prime"], c["K"]
        if c["Psi"] / Mp <= c["psi_max"] / M:
            R = _ceil1(max(8 * beta / mu * math.log(beta * D**2 * mu * Mp / (d * c["Psi"])), L**2 / (d * c["Psi"])))
        else:
            R = _ceil1(max(8 * beta / mu * math.log(beta * D**2 * mu * M / (d * c["psi_max"])), L**2 / (d * c["psi_max"])))
        R = c.get("R") or R
        noise = d * min(c["Sigma_sq"] / Mp, c["sigma_sq_max"] / M)
        eta = stich_stepsize(mu, 4.0 * beta, D**2, R, 2.0 * (4.0 * L**2 / (M * K) + noise))
        gamma = (1.0 - mu * eta) ** (-(np.arange(R) + 1.0))
        return Schedule(np.full(R, eta), gamma)
    raise PreconditionError(f"unknown schedule case {case!r}; expected one of {SCHEDULE_CASES}")


def acsa_schedule(R: int, beta: float, V: float = 0.0, D: float = 1.0) -> Schedule:
    """alpha_r = 2/(r+1), eta_r = 4 u/(r(r+1)) with u = max{2 beta, V (R+1)^1.5 / (sqrt(6) D)}."""
    upsilon = max(2.0 * beta, V * (R + 1) ** 1.5 / (math.sqrt(6.0) * D))
    return _acsa_weights(R, upsilon)


def _acsa_weights(R: int, upsilon: float) -> Schedule:
    r = np.arange(1, R + 1, dtype=float)
    alpha = 2.0 / (r + 1.0)
    return Schedule(4.0 * upsilon / (r * (r + 1.0)), np.full(R, 1.0 / max(R, 1)), alpha)


def _ceil1(x: float) -> int:
    if not math.isfinite(x):
        raise PreconditionError("round count is not finite")
    # absorb float noise in values that should be integral
    return max(1, int(math.ceil(x - 1e-9 * max(1.0, abs(x)))))


# -------------------------------------------------------------- round counts

ROUND_RULES = (
    "mbsgd-convex", "mbsgd-sc", "nonsmooth-mbsgd-convex", "nonsmooth-mbsgd-sc",
    "accel-smooth-convex", "accel-smooth-sc", "accel-nonsmooth-convex", "accel-nonsmooth-sc",
    "sdp-convex", "sdp-sc", "onepass",
)


def _log(x: float) -> float:
    if not x > 0:
        raise PreconditionError(f"log of non-positive argument {x!r}")
    return math.log(x)


def round_count(rule: str, **c) -> int:
    """Prescribed number of communication rounds, ceiled and floored at 1.

    Constants use the homogeneous notation: L, beta, mu, D, d, n, N, M, K,
    eps0 (eps for sdp rules), delta0, Phi_hat_sq.
    """
    def g(*names):
        missing = [k for k in names if k not in c]
        if missing:
            raise PreconditionError(f"{rule}: missing constants {missing}")
        return [c[k] for k in names]

    if rule == "mbsgd-convex":
        beta, D, M, L, n, e, d, K = g("beta", "D", "M", "L", "n", "eps0", "d", "K")
        val = max(beta * D * math.sqrt(M) / L * min(math.sqrt(n), e * n / math.sqrt(d)), min(n, e * e * n * n / d) / K)
    elif rule == "mbsgd-sc":
        beta, mu, D, M, L, n, e, d, K = g("beta", "mu", "D", "M", "L", "n", "eps0", "d", "K")
        val = max(8 * beta / mu * _log(beta * D**2 * mu * M * e * e * n * n / (d * L * L)),
                  min(n, e * e * n * n / d) / K)
    elif rule == "nonsmooth-mbsgd-convex":
        M, n, e, d = g("M", "n", "eps0", "d")
        val = M * min(n, e * e * n * n / d)
    elif rule == "nonsmooth-mbsgd-sc":
        M, n, e, d, D, mu, L = g("M", "n", "eps0", "d", "D", "mu", "L")
        val = M * min(n, e * e * n * n / d) * _log(D**2 * mu**2 * M**2 * e * e * n**3 / (d * L * L))
    elif rule in ("accel-smooth-convex", "accel-smooth-sc"):
        beta, D, M, L, n, e, d, K, N, d0 = g("beta", "D", "M", "L", "n", "eps0", "d", "K", "N", "delta0")
        phi = c.get("Phi_hat_sq", L * L)
        tail = (M * K < N * n) * e * e * n * n * phi / (K * d * _log(1 / d0) * L * L)
        if rule == "accel-smooth-convex":
            head = math.sqrt(beta * D * math.sqrt(M) * e * n / (L * math.sqrt(d)))
        else:
            (mu,) = g("mu")
            head = math.sqrt(beta / mu) * _log(D * mu * M * e * e * n * n / (L * d))
        val = max(head, tail)
    elif rule in ("accel-nonsmooth-convex", "accel-nonsmooth-sc"):
        M, n, e, d, K, N, d0 = g("M", "n", "eps0", "d", "K", "N", "delta0")
        lg = _log(1 / d0)
        head = math.sqrt(M) * e * n / math.sqrt(d * lg)
        if rule == "accel-nonsmooth-sc":
            D, mu, L = g("D", "mu", "L")
            head *= _log(D * mu * M * e * e * n * n / (L * d))
        val = max(head, (M * K < N * n) * e * e * n * n / (K * d * lg))
    elif rule in ("sdp-convex", "sdp-sc"):
        n, N, M, e, d, beta, L, D = g("n", "N", "M", "eps", "d", "beta", "L", "D")
        common = [n * n * N * N * e * e / M, N / M, min(n, e * e * n * n * N * N / (d * M))]
        if rule == "sdp-convex":
            common.append(beta * D / L * min(math.sqrt(n * M), e * n * N / math.sqrt(d)))
        else:
            (mu,) = g("mu")
            common.append(8 * beta / mu * _log(beta * D * D * mu * e * e * n * n * N * N / (d * L * L)))
        val = max(common)
    elif rule == "onepass":
        n, K = g("n", "K")
        return max(1, n // K)
    else:
        raise PreconditionError(f"unknown round rule {rule!r}; expected one of {ROUND_RULES}")
    return _ceil1(val)


def onepass_batch_size(L: float, beta: float, D: float, n: int, d: int, eps0: float, delta0: float, M: float) -> int:
    """K = (L/(beta D))^(2/5) n^(3/5) (d ln(1/delta0))^(1/5) / (eps0^(2/5) M^(1/5)), clamped to [1, n]."""
    K = (L / (beta * D)) ** 0.4 * n**0.6 * (d * math.log(1 / delta0)) ** 0.2 / (eps0**0.4 * M**0.2)
    return int(min(n, max(1, round(K))))


# ------------------------------------------------------------------- results

@dataclass
class RunResult:
    w_hat: np.ndarray
    transcripts: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    history: Optional[list] = None
    ledger: Optional[PrivacyLedger] = None
    extras: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "train_loss", "grad_norm"])
        for m in self.metrics:
            writer.writerow([m["round"], repr(m["train_loss"]), repr(m["grad_norm"])])
        return buf.getvalue()


def empirical_loss(fed: FederatedDataset, loss: LossSpec, w) -> float:
    return float(sum(p * c.scale * mean_value(loss, w, c.features, c.labels) for p, c in zip(fed.weights, fed.clients)))


def empirical_grad(fed: FederatedDataset, loss: LossSpec, w) -> np.ndarray:
    return sum(p * c.scale * mean_grad(loss, w, c.features, c.labels) for p, c in zip(fed.weights, fed.clients))


def _metric(fed, loss, r, w, extra_mu=0.0, center=None):
    value = empirical_loss(fed, loss, w)
    g = empirical_grad(fed, loss, w)
    if extra_mu:
        diff = w - center
        value += 0.5 * extra_mu * float(diff @ diff)
        g = g + extra_mu * diff
    return {"round": r, "train_loss": value, "grad_norm": float(np.linalg.norm(g))}


# --------------------------------------------------------------- round engine

PlanLike = Union[NoisePlan, Sequence[NoisePlan], float, None]


def _client_sigmas(plan: PlanLike, N: int) -> list:
    if plan is None:
        return [0.0] * N
    if isinstance(plan, (int, float)):
        return [float(plan)] * N
    if isinstance(plan, NoisePlan):
        return [plan.sigma_sq] * N
    plans = list(plan)
    if len(plans) != N:
        raise ValueError("one noise plan per client required")
    return [p if isinstance(p, (int, float)) else p.sigma_sq for p in plans]


def _plan_ledger(plan: PlanLike) -> Optional[PrivacyLedger]:
    if isinstance(plan, NoisePlan) and plan.mode == "mbsgd-advanced-composition":
        p = dict(plan.inputs)
        return mbsgd_ledger(p["eps0"], p["delta0"], plan.R, unsafe=True)
    return None


def _default_K(plan: PlanLike, fed: FederatedDataset) -> int:
    if isinstance(plan, NoisePlan):
        return plan.K_min
    if plan is not None and not isinstance(plan, (int, float)):
        return max(p.K_min for p in plan)
    return fed.n_min


class _Engine:
    """Draws and evaluates client messages for one run."""

    def __init__(self, fed, loss, plan, K, availability, seed, mode, workers, record_transcript):
        if not fed.uniform:
            raise PreconditionError("non-uniform client weights: call apply_client_weights first")
        self.fed, self.loss, self.seed, self.mode = fed, loss, int(seed), mode
        self.sigmas = _client_sigmas(plan, fed.N)
        K = _default_K(plan, fed) if K is None else int(K)
        if K < 1:
            raise PreconditionError("K must be at least 1")
        self.Ks = fedsim.batch_sizes(fed, K)
        self.availability = availability or fedsim.AvailabilityModel.fixed(fed.N)
        self.availability.validate(fed.N)
        self.workers = workers
        self.record = record_transcript
        self.transcripts: list = []
        self.cursors = None
        if mode == fedsim.DISJOINT:
            self.cursors = [fedsim.OnePassCursor(c.n, fedsim.stream(seed, fedsim.ORDER, i))
                            for i, c in enumerate(fed.clients)]
        elif mode != fedsim.WITH_REPLACEMENT:
            raise ValueError(f"unknown sampling mode {mode!r}")
        ns = {c.n for c in fed.clients}
        self.stacked = None
        if len(ns) == 1 and len(set(self.Ks)) == 1:
            self.stacked = (np.stack([c.features for c in fed.clients]),
                            None if fed.clients[0].labels is None else np.stack([c.labels for c in fed.clients]),
                            np.array([c.scale for c in fed.clients]))

    def active(self, r: int) -> np.ndarray:
        return fedsim.sample_round(fedsim.stream(self.seed, fedsim.AVAILABILITY, r), self.availability, self.fed.N)

    def _draws(self, i: int, r: int, steps: int):
        """Batch indices of shape (steps, K_i) and noise of shape (steps, d) for
        client i in round r. Indices are None when the client uses its whole
        dataset. All indices are drawn before all noise, so a single step
        draws indices then noise.
        """
        c = self.fed.clients[i]
        rng = fedsim.stream(self.seed, fedsim.CLIENT, i, r)
        K = self.Ks[i]
        if self.mode == fedsim.WITH_REPLACEMENT:
            idx = None if K >= c.n else rng.integers(0, c.n, size=(steps, K))
        else:
            idx = np.stack([fedsim.draw_batch(rng, c.n, K, self.mode, self.cursors[i]) for _ in range(steps)])
        sigma_sq = self.sigmas[i]
        noise = rng.standard_normal((steps, self.fed.d))
        noise = noise * math.sqrt(sigma_sq) if sigma_sq > 0 else noise * 0.0
        return idx, noise

    def _grad(self, i: int, w, idx):
        c = self.fed.clients[i]
        if idx is None:
            X, y = c.features, c.labels
        else:
            X = c.features[idx]
            y = None if c.labels is None else c.labels[idx]
        return c.scale * mean_grad(self.loss, w, X, y)

    def gradients(self, r: int, w, active) -> list:
        """Noisy minibatch gradients of the active clients at w."""
        draws = [self._draws(i, r, 1) for i in active]
        if self.stacked is not None and all(idx is not None for idx, _ in draws):
            G = self._stacked_grads(np.broadcast_to(w, (len(active), w.shape[0])), active,
                                    np.stack([idx[0] for idx, _ in draws]))
            return [G[j] + draws[j][1][0] for j in range(len(active))]

        def one(j):
            idx, noise = draws[j]
            return self._grad(active[j], w, None if idx is None else idx[0]) + noise[0]
        return fedsim.ordered_map(one, range(len(active)), self.workers)

    def _stacked_grads(self, W, active, idx):
        feats, labels, scales = self.stacked
        act = np.asarray(active)
        X = feats[act[:, None], idx]
        y = None if labels is None else labels[act[:, None], idx]
        return batched_mean_grad(self.loss, W, X, y) * scales[act, None]

    def local_iterates(self, r: int, w, active, steps: int, eta: float, D: float) -> list:
        draws = [self._draws(i, r, steps) for i in active]
        if self.stacked is not None and all(idx is not None for idx, _ in draws):
            idx = np.stack([d[0] for d in draws], axis=1)
            noise = np.stack([d[1] for d in draws], axis=1)
            W = np.tile(w, (len(active), 1))
            for q in range(steps):
                W = _project_rows(W - eta * (self._stacked_grads(W, active, idx[q]) + noise[q]), D)
            return [W[j] for j in range(len(active))]

        def one(j):
            idx, noise = draws[j]
            v = w.copy()
            for q in range(steps):
                g = self._grad(active[j], v, None if idx is None else idx[q])
                v = project_ball(v - eta * (g + noise[q]), D)
            return v
        return fedsim.ordered_map(one, range(len(active)), self.workers)

    def log(self, r, active, msgs):
        if self.record:
            self.transcripts.append(RoundTranscript(r, tuple(active), tuple(msgs)))


def _project_rows(W: np.ndarray, D: float) -> np.ndarray:
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    return W * np.minimum(1.0, D / np.maximum(norms, 1e-300))


def _start(fed, loss, w0):
    w = np.zeros(fed.d) if w0 is None else as_vector(w0, fed.d)
    return project_ball(w, loss.D)


# ----------------------------------------------------------------- algorithms

def mbsgd_run(fed: FederatedDataset, loss: LossSpec, plan: PlanLike, schedule: Schedule,
              availability: Optional[fedsim.AvailabilityModel] = None, seed: int = 0, *,
              K: Optional[int] = None, w0=None, mode: str = fedsim.WITH_REPLACEMENT, shuffle: bool = False,
              workers: int = 1, record_transcript: bool = True, track_metrics: bool = True,
              record_history: bool = False) -> RunResult:
    """Noisy projected minibatch SGD with gamma-weighted iterate averaging.

    The average runs over w_0, ..., w_{R-1}. K >= n_i means client i uses
    its whole local dataset.
    """
    eng = _Engine(fed, loss, plan, K, availability, seed, mode, workers, record_transcript)
    w = _start(fed, loss, w0)
    R = schedule.R
    if R == 0:
        return RunResult(w, history=[w] if record_history else None)
    history = [w] if record_history else None
    metrics = [_metric(fed, loss, 0, w)] if track_metrics else []
    acc = np.zeros_like(w)
    for r in range(R):
        acc += schedule.gamma[r] * w
        active = eng.active(r)
        msgs = eng.gradients(r, w, active)
        if shuffle:
            msgs = fedsim.shuffle_stage(msgs, fedsim.stream(seed, fedsim.SHUFFLE, r))
        eng.log(r, active, msgs)
        w = project_ball(w - schedule.eta[r] * fedsim.server_average(msgs), loss.D)
        if record_history:
            history.append(w)
        if track_metrics:
            metrics.append(_metric(fed, loss, r + 1, w))
    w_hat = project_ball(acc / schedule.gamma.sum(), loss.D)
    return RunResult(w_hat, eng.transcripts, metrics, history, _plan_ledger(plan))


@dataclass(frozen=True)
class ACSAState:
    w: np.ndarray
    w_ag: np.ndarray
    w_md: Optional[np.ndarray] = None


def acsa_middle(state: ACSAState, alpha: float, eta: float, mu: float) -> np.ndarray:
    denom = eta + (1.0 - alpha * alpha) * mu
    if not denom > 1e-300:
        raise PreconditionError("denominator underflow in AC-SA search point")
    a = (1.0 - alpha) * (mu + eta) / denom
    b = alpha * ((1.0 - alpha) * mu + eta) / denom
    return a * state.w_ag + b * state.w


def acsa_round(state: ACSAState, g_tilde, alpha: float, eta: float, mu: float, D: float) -> ACSAState:
    """One AC-SA update given the noisy gradient taken at the search point.

    The prox step minimises alpha[<g, w> + mu/2 ||w_md - w||^2]
    + ((1-alpha) mu/2 + eta/2) ||w_prev - w||^2 over the ball. The objective is
    an isotropic quadratic, so its constrained minimiser is the projection of
    (alpha mu w_md + ((1-alpha) mu + eta) w_prev - alpha g) / (mu + eta).
    """
    w_md = acsa_middle(state, alpha, eta, mu)
    denom = mu + eta
    if not denom > 1e-300:
        raise PreconditionError("denominator underflow in AC-SA prox step")
    g = np.asarray(g_tilde, dtype=float)
    w_new = project_ball((alpha * mu * w_md + ((1.0 - alpha) * mu + eta) * state.w - alpha * g) / denom, D)
    w_ag = alpha * w_new + (1.0 - alpha) * state.w_ag
    return ACSAState(w_new, project_ball(w_ag, D), w_md)


def acsa_run(fed: FederatedDataset, loss: LossSpec, plan: PlanLike, schedule: Schedule,
             regularizer_lambda: float = 0.0, availability: Optional[fedsim.AvailabilityModel] = None,
             seed: int = 0, *, K: Optional[int] = None, w0=None, mu: Optional[float] = None,
             mode: str = fedsim.WITH_REPLACEMENT, round_offset: int = 0, engine: Optional[_Engine] = None,
             workers: int = 1, record_transcript: bool = True, track_metrics: bool = True,
             record_history: bool = False) -> RunResult:
    """Accelerated noisy minibatch SGD on F + lambda/2 ||w - w0||^2; returns w_R^ag.

    ``mu`` is the strong-convexity modulus used by the updates. It defaults to
    ``regularizer_lambda`` when a regulariser is set and to the loss's mu
    otherwise.
    """
    if schedule.alpha is None:
        raise PreconditionError("AC-SA needs an alpha schedule")
    eng = engine or _Engine(fed, loss, plan, K, availability, seed, mode, workers, record_transcript)
    w_start = _start(fed, loss, w0)
    lam = float(regularizer_lambda)
    mu_r = (lam if lam > 0 else loss.mu) if mu is None else float(mu)
    state = ACSAState(w_start, w_start)
    history = [w_start] if record_history else None
    metrics = [_metric(fed, loss, 0, w_start, lam, w_start)] if track_metrics else []
    for k in range(schedule.R):
        r = round_offset + k
        alpha, eta = schedule.alpha[k], schedule.eta[k]
        w_md = acsa_middle(state, alpha, eta, mu_r)
        active = eng.active(r)
        msgs = eng.gradients(r, w_md, active)
        eng.log(r, active, msgs)
        g = fedsim.server_average(msgs)
        if lam:
            g = g + lam * (w_md - w_start)
        state = acsa_round(state, g, alpha, eta, mu_r, loss.D)
        if record_history:
            history.append(state.w_ag)
        if track_metrics:
            metrics.append(_metric(fed, loss, r + 1, state.w_ag, lam, w_start))
    return RunResult(state.w_ag, eng.transcripts, metrics, history, extras={"w_last": state.w})


def multistage_stage_lengths(k: int, mu: float, beta: float, V_sq: float, Delta: float):
    """(R_k, upsilon_k) for stage k >= 1."""
    R_k = _ceil1(max(4.0 * math.sqrt(2.0 * beta / mu), 128.0 * V_sq / (3.0 * mu * Delta * 2.0 ** (-(k + 1)))))
    upsilon = max(2.0 * beta, math.sqrt(mu * V_sq / (3.0 * Delta * 2.0 ** (-(k - 1)) * R_k * (R_k + 1) * (R_k + 2))))
    return R_k, upsilon


def multistage_acsa(fed: FederatedDataset, loss: LossSpec, plan: PlanLike, Delta: Optional[float] = None,
                    V_sq: float = 0.0, mu: Optional[float] = None, beta: Optional[float] = None,
                    R_budget: int = 100, seed: int = 0, *, availability=None, K=None, w0=None,
                    workers: int = 1, record_transcript: bool = True, track_metrics: bool = True) -> RunResult:
    """Restarted AC-SA for strongly convex objectives.

    Stage k runs R_k rounds from the previous stage's output while the total
    stays within R_budget. ``extras['stage_outputs']`` holds q_0, q_1, ...
    """
    mu = loss.mu if mu is None else mu
    beta = loss.beta if beta is None else beta
    if not mu or mu <= 0:
        raise PreconditionError("multi-stage AC-SA needs mu > 0")
    if beta is None:
        raise PreconditionError("multi-stage AC-SA needs a smoothness constant")
    Delta = loss.L * loss.D if Delta is None else Delta
    eng = _Engine(fed, loss, plan, K, availability, seed, fedsim.WITH_REPLACEMENT, workers, record_transcript)
    q = _start(fed, loss, w0)
    outputs, lengths, metrics = [q], [], []
    used = 0
    k = 1
    while True:
        R_k, upsilon = multistage_stage_lengths(k, mu, beta, V_sq, Delta)
        if used + R_k > R_budget:
            break
        res = acsa_run(fed, loss, plan, _acsa_weights(R_k, upsilon), 0.0, seed=seed, w0=q, mu=mu,
                       round_offset=used, engine=eng, track_metrics=track_metrics)
        metrics.extend(res.metrics if not metrics else res.metrics[1:])
        q = res.w_hat
        outputs.append(q)
        lengths.append(R_k)
        used += R_k
        k += 1
    if not lengths:
        raise PreconditionError(f"R_budget={R_budget} is smaller than the first stage ({R_k} rounds)")
    return RunResult(q, eng.transcripts, metrics, extras={"stage_outputs": outputs, "stage_lengths": lengths})


def onepass_run(fed: FederatedDataset, loss: LossSpec, eps0: float, delta0: float, K: Optional[int] = None,
                seed: int = 0, *, availability=None, w0=None, workers: int = 1,
                record_transcript: bool = True, track_metrics: bool = True, unsafe: bool = False) -> RunResult:
    """Accelerated noisy minibatch SGD over disjoint local batches (each sample used once).

    R = floor(n_min/K). The per-round budget is eps0 in every round, so the
    returned ledger has compositionality constant sqrt(R).
    """
    availability = availability or fedsim.AvailabilityModel.fixed(fed.N)
    M, _ = fedsim.availability_moments(availability)
    n = fed.n_min
    L, beta = loss.L, loss.beta
    if K is None:
        if beta is None or beta <= 0:
            raise PreconditionError("batch-size rule needs a positive smoothness constant")
        K = onepass_batch_size(L, beta, loss.D, n, fed.d, eps0, delta0, M)
    plan = onepass_noise_plan(L, K, eps0, delta0, n, unsafe=unsafe)
    R = plan.R
    V = math.sqrt(L * L / (M * K) + fed.d * plan.sigma_sq / M)
    lam = V / (2.0 * loss.D * math.sqrt(R))
    sched = acsa_schedule(R, (beta or 0.0) + lam, V, loss.D)
    eng = _Engine(fed, loss, plan, K, availability, seed, fedsim.DISJOINT, workers, record_transcript)
    res = acsa_run(fed, loss, plan, sched, lam, availability, seed, w0=w0, engine=eng,
                   track_metrics=track_metrics)
    res.ledger = PrivacyLedger.uniform(R, eps0, delta0, eps0, delta0)
    res.extras.update({"K": K, "R": R, "plan": plan, "batches": [list(c.used) for c in eng.cursors]})
    return res


def local_sgd_run(fed: FederatedDataset, loss: LossSpec, plan: PlanLike, local_steps: int, eta: float,
                  availability: Optional[fedsim.AvailabilityModel] = None, seed: int = 0, *, R: int = 1,
                  K: Optional[int] = None, w0=None, workers: int = 1, record_transcript: bool = True,
                  track_metrics: bool = True) -> RunResult:
    """Baseline: each active client runs ``local_steps`` noisy projected SGD steps
    from w_r and the server averages the returned iterates.

    ``plan`` must already account for R * local_steps noisy releases. The
    output is the last server iterate.
    """
    if local_steps < 1:
        raise PreconditionError("local_steps must be at least 1")
    eng = _Engine(fed, loss, plan, K, availability, seed, fedsim.WITH_REPLACEMENT, workers, record_transcript)
    w = _start(fed, loss, w0)
    metrics = [_metric(fed, loss, 0, w)] if track_metrics else []
    for r in range(R):
        active = eng.active(r)
        iterates = eng.local_iterates(r, w, active, local_steps, eta, loss.D)
        eng.log(r, active, iterates)
        w = project_ball(fedsim.server_average(iterates), loss.D)
        if track_metrics:
            metrics.append(_metric(fed, loss, r + 1, w))
    return RunResult(w, eng.transcripts, metrics)
