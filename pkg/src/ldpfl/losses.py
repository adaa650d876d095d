"""Loss families with their constants, gradient oracles, norm clipping and
Moreau-envelope smoothing.

Samples are rows of a features array; linear-model families also take a label
vector. Every family except ``quadratic`` is a function of the margin
z = <w, a> (and the label), which keeps batch gradients vectorised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ConvergenceError, LossSpec, PreconditionError, as_vector, project_ball

GLM_FAMILIES = ("linear", "logistic-clipped", "squared-clipped", "absolute", "hinge")
NONSMOOTH_FAMILIES = ("absolute", "hinge")


@dataclass(frozen=True)
class GradientSample:
    grad: np.ndarray
    loss_value: float


@dataclass(frozen=True)
class MoreauEnvelope:
    inner: LossSpec
    beta: float
    prox_tol: float = 1e-10
    prox_max_iter: int = 10_000

    def __post_init__(self):
        if not self.beta > 0:
            raise PreconditionError("smoothing parameter beta must be positive")
        if self.inner.family == "moreau-wrapped":
            raise PreconditionError("nested envelopes are not supported")

    @property
    def L(self) -> float:
        return 2.0 * self.inner.L

    def as_loss(self) -> LossSpec:
        return moreau_wrap(self.inner, self.beta)


# ---------------------------------------------------------------- factories

def _max_row_norm(X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return float(np.linalg.norm(X, axis=1).max())


def quadratic_loss(D: float, centers=None, clip_threshold=None) -> LossSpec:
    """f(w, c) = 1/2 ||w - c||^2 on the ball; L covers every w in the ball."""
    cmax = 0.0 if centers is None else _max_row_norm(centers)
    return LossSpec("quadratic", L=D + cmax, D=D, beta=1.0, mu=1.0, clip_threshold=clip_threshold)


def linear_loss(features, D: float) -> LossSpec:
    return LossSpec("linear", L=max(_max_row_norm(features), 1e-300), D=D, beta=0.0)


def logistic_loss(features, D: float, clip_threshold=None, logit_bound: float = 15.0) -> LossSpec:
    """Logistic loss on a margin clipped to [-logit_bound, logit_bound]; L = 2 max ||x||."""
    r = _max_row_norm(features)
    return LossSpec("logistic-clipped", L=2.0 * r, D=D, beta=r * r / 4.0,
                    clip_threshold=clip_threshold, logit_bound=logit_bound)


def squared_loss(features, labels, D: float, clip_threshold=None) -> LossSpec:
    """1/2 (<w, a> - y)^2. With clipping, L is the clip threshold."""
    r = _max_row_norm(features)
    ymax = float(np.max(np.abs(labels))) if len(labels) else 0.0
    L = r * (D * r + ymax) if clip_threshold is None else clip_threshold
    return LossSpec("squared-clipped", L=max(L, 1e-300), D=D, beta=r * r, clip_threshold=clip_threshold)


def absolute_loss(features, D: float) -> LossSpec:
    return LossSpec("absolute", L=_max_row_norm(features), D=D)


def hinge_loss(features, D: float) -> LossSpec:
    return LossSpec("hinge", L=_max_row_norm(features), D=D)


def moreau_wrap(inner: LossSpec, beta: float) -> LossSpec:
    return LossSpec("moreau-wrapped", L=2.0 * inner.L, D=inner.D, beta=beta, mu=0.0,
                    clip_threshold=inner.clip_threshold, inner=inner, smoothing=beta)


# ------------------------------------------------------ margin-based families

def _labels(y, z):
    if y is None:
        return np.zeros_like(z)
    return y


def _glm_value(loss: LossSpec, z, y):
    fam = loss.family
    if fam == "linear":
        return z
    if fam == "logistic-clipped":
        zc = np.clip(z, -loss.logit_bound, loss.logit_bound)
        return np.logaddexp(0.0, -y * zc)
    if fam == "squared-clipped":
        return 0.5 * (z - y) ** 2
    if fam == "absolute":
        return np.abs(z - y)
    if fam == "hinge":
        return np.maximum(0.0, 1.0 - y * z)
    raise ValueError(fam)


def _glm_deriv(loss: LossSpec, z, y):
    """d/dz of the family's link, using the zero subgradient at kinks."""
    fam = loss.family
    if fam == "linear":
        return np.ones_like(z)
    if fam == "logistic-clipped":
        b = loss.logit_bound
        inside = np.abs(z) < b
        zc = np.clip(z, -b, b)
        # -y * sigmoid(-y z), written to avoid overflow
        return np.where(inside, -y * np.exp(-np.logaddexp(0.0, y * zc)), 0.0)
    if fam == "squared-clipped":
        return z - y
    if fam == "absolute":
        return np.sign(z - y)
    if fam == "hinge":
        return np.where(y * z < 1.0, -y, 0.0)
    raise ValueError(fam)


def _clip_rows(G: np.ndarray, threshold: Optional[float]) -> np.ndarray:
    if threshold is None:
        return G
    norms = np.linalg.norm(G, axis=-1, keepdims=True)
    factor = np.minimum(1.0, threshold / np.maximum(norms, 1e-300))
    return G * factor


def _check_dims(w, X):
    if X.shape[-1] != w.shape[-1]:
        raise ValueError(f"dimension mismatch: model has {w.shape[-1]}, samples have {X.shape[-1]}")


def per_sample_values(loss: LossSpec, w, X, y=None) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dims(w, X)
    if loss.family == "quadratic":
        return 0.5 * np.sum((w - X) ** 2, axis=-1)
    if loss.family == "moreau-wrapped":
        env = MoreauEnvelope(loss.inner, loss.smoothing)
        return np.array([moreau_value_grad(env, w, X[j], None if y is None else y[j])[0] for j in range(len(X))])
    z = X @ w
    return _glm_value(loss, z, _labels(y, z))


def per_sample_grads(loss: LossSpec, w, X, y=None) -> np.ndarray:
    """(k, d) array of per-sample gradients, norm-clipped if the loss says so."""
    w = np.asarray(w, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dims(w, X)
    if loss.family == "quadratic":
        G = w - X
    elif loss.family == "moreau-wrapped":
        env = MoreauEnvelope(loss.inner, loss.smoothing)
        G = np.stack([moreau_value_grad(env, w, X[j], None if y is None else y[j])[1] for j in range(len(X))])
    else:
        z = X @ w
        G = _glm_deriv(loss, z, _labels(y, z))[:, None] * X
    return _clip_rows(G, loss.clip_threshold)


def mean_grad(loss: LossSpec, w, X, y=None) -> np.ndarray:
    """Average gradient over the rows of X.

    For unclipped margin families this avoids materialising the (k, d) matrix.
    """
    w = np.asarray(w, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if loss.clip_threshold is None and loss.family in GLM_FAMILIES:
        _check_dims(w, X)
        z = X @ w
        return (_glm_deriv(loss, z, _labels(y, z)) @ X) / X.shape[0]
    if loss.clip_threshold is None and loss.family == "quadratic":
        _check_dims(w, X)
        return w - X.mean(axis=0)
    return per_sample_grads(loss, w, X, y).mean(axis=0)


def mean_value(loss: LossSpec, w, X, y=None) -> float:
    return float(np.mean(per_sample_values(loss, w, X, y)))


def grad(loss: LossSpec, w, x, y=None) -> GradientSample:
    """Gradient and value of the loss at a single sample."""
    w = as_vector(w)
    x = as_vector(x)
    if x.shape != w.shape:
        raise ValueError(f"dimension mismatch: model has {w.shape[0]}, sample has {x.shape[0]}")
    yy = None if y is None else np.array([float(y)])
    g = per_sample_grads(loss, w, x[None, :], yy)[0]
    v = float(per_sample_values(loss, w, x[None, :], yy)[0])
    return GradientSample(g, v)


def batched_mean_grad(loss: LossSpec, W, X, y=None) -> np.ndarray:
    """Mean gradients for a stack of models.

    W has shape (m, d), X has shape (m, k, d) and y (m, k); returns (m, d).
    """
    W = np.asarray(W, dtype=float)
    X = np.asarray(X, dtype=float)
    if loss.family == "quadratic":
        G = W[:, None, :] - X
    elif loss.family in GLM_FAMILIES:
        z = np.einsum("mkd,md->mk", X, W)
        s = _glm_deriv(loss, z, _labels(y, z))
        if loss.clip_threshold is None:
            return np.einsum("mk,mkd->md", s, X) / X.shape[1]
        G = s[..., None] * X
    else:
        return np.stack([mean_grad(loss, W[i], X[i], None if y is None else y[i]) for i in range(len(W))])
    return _clip_rows(G, loss.clip_threshold).mean(axis=1)


# ------------------------------------------------------------ Moreau envelope

def _scalar_prox_step(family: str, s0: float, q: float, t: float, y: float) -> float:
    """Subgradient g of the link at the prox point of v -> link(<v,a>) with step t.

    The unconstrained prox of t*link(<., a>) at z is z - t g a, where
    s0 = <z, a> and q = ||a||^2.
    """
    tq = t * q
    if family == "absolute":
        u0 = s0 - y
        if u0 > tq:
            return 1.0
        if u0 < -tq:
            return -1.0
        return u0 / tq if tq > 0 else 0.0
    if family == "hinge":
        u0 = y * s0
        if u0 >= 1.0:
            return 0.0
        if u0 < 1.0 - tq:
            return -y
        return y * (u0 - 1.0) / tq if tq > 0 else 0.0
    raise ValueError(family)


def _nonsmooth_prox(inner: LossSpec, w, a, y, beta: float, tol: float, max_iter: int):
    """argmin over the ball of link(<v,a>) + beta/2 ||w - v||^2, exactly.

    When the unconstrained prox leaves the ball, the multiplier nu of the norm
    constraint solves ||p(nu)|| = D with p(nu) the unconstrained prox of
    f/(beta+nu) at beta w/(beta+nu); it is found by bisection.
    """
    q = float(a @ a)
    yv = 0.0 if y is None else float(y)

    def prox_at(nu):
        c = beta / (beta + nu) * w
        g = _scalar_prox_step(inner.family, float(c @ a), q, 1.0 / (beta + nu), yv)
        return c - g / (beta + nu) * a

    v = prox_at(0.0)
    D = inner.D
    if np.linalg.norm(v) <= D:
        return v
    lo, hi = 0.0, beta
    it = 0
    while np.linalg.norm(prox_at(hi)) > D:
        lo, hi = hi, 2.0 * hi
        it += 1
        if it > 200:
            raise ConvergenceError("could not bracket ball multiplier", best=project_ball(v, D))
    for it in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if np.linalg.norm(prox_at(mid)) > D:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return project_ball(prox_at(hi), D)


def _smooth_prox(inner: LossSpec, w, x, y, beta: float, tol: float, max_iter: int):
    """Projected accelerated gradient on h(v) = f(v, x) + beta/2 ||v - w||^2.

    Stops when the gradient-mapping norm drops below tol.
    """
    D = inner.D
    lip = (inner.beta or 0.0) + beta
    strong = beta + inner.mu
    t = 1.0 / lip
    q = strong / lip
    momentum = (1.0 - math.sqrt(q)) / (1.0 + math.sqrt(q))
    X = x[None, :]
    Y = None if y is None else np.array([float(y)])

    def hgrad(v):
        return per_sample_grads(inner, v, X, Y)[0] + beta * (v - w)

    v = project_ball(w, D)
    z = v.copy()
    best, best_gm = v, math.inf
    for _ in range(max_iter):
        v_next = project_ball(z - t * hgrad(z), D)
        gm = float(np.linalg.norm(z - v_next)) / t
        if gm < best_gm:
            best, best_gm = v_next, gm
        if gm <= tol:
            return v_next
        z = v_next + momentum * (v_next - v)
        v = v_next
    raise ConvergenceError(f"prox solver did not reach tolerance {tol} (best gradient mapping {best_gm:.3g})",
                           best=best)


def prox_point(env: MoreauEnvelope, w, x, y=None) -> np.ndarray:
    inner = env.inner
    w = as_vector(w)
    x = as_vector(x, w.shape[0])
    if inner.clip_threshold is not None:
        raise PreconditionError("envelope of a gradient-clipped loss is not defined")
    if inner.family in NONSMOOTH_FAMILIES:
        return _nonsmooth_prox(inner, w, x, y, env.beta, env.prox_tol, env.prox_max_iter)
    if inner.beta is None:
        raise PreconditionError(f"no prox routine for non-smooth family {inner.family!r}")
    return _smooth_prox(inner, w, x, y, env.beta, env.prox_tol, env.prox_max_iter)


def moreau_value_grad(env: MoreauEnvelope, w, x, y=None):
    """Value and gradient of the envelope min_v f(v, x) + beta/2 ||w - v||^2."""
    w = as_vector(w)
    v = prox_point(env, w, x, y)
    yy = None if y is None else np.array([float(y)])
    fv = float(per_sample_values(env.inner, v, as_vector(x)[None, :], yy)[0])
    diff = w - v
    return fv + 0.5 * env.beta * float(diff @ diff), env.beta * diff


# ---------------------------------------------------------- smoothing choice

SMOOTHING_RULES = ("mbsgd-convex", "mbsgd-sc", "accel-convex", "accel-sc")


def smoothing_beta(theorem: str, **p) -> float:
    """Smoothing parameter prescribed for the non-smooth guarantees.

    ``mbsgd-*`` are the projected-SGD rules and ``accel-*`` the accelerated
    ones. Parameters: L, D, mu, M_tilde, n_min, d, and either Xi_tilde or
    Psi_tilde (Xi_tilde = Psi_tilde / L^2).
    """
    def need(*names):
        missing = [k for k in names if k not in p]
        if missing:
            raise PreconditionError(f"{theorem}: missing constants {missing}")

    def xi_t():
        if "Xi_tilde" in p:
            return p["Xi_tilde"]
        need("Psi_tilde", "L")
        return p["Psi_tilde"] / p["L"] ** 2

    def psi_t():
        if "Psi_tilde" in p:
            return p["Psi_tilde"]
        need("Xi_tilde", "L")
        return p["Xi_tilde"] * p["L"] ** 2

    if theorem == "mbsgd-convex":
        need("L", "D", "M_tilde", "n_min", "d")
        beta = p["L"] * math.sqrt(p["M_tilde"]) / p["D"] * min(math.sqrt(p["n_min"]), 1.0 / math.sqrt(p["d"] * xi_t()))
    elif theorem == "mbsgd-sc":
        need("mu", "M_tilde", "n_min", "d")
        beta = p["mu"] * p["M_tilde"] * min(p["n_min"], 1.0 / (p["d"] * xi_t()))
    elif theorem == "accel-convex":
        need("L", "D", "M_tilde", "d")
        beta = p["L"] ** 2 * math.sqrt(p["M_tilde"]) / (p["D"] * math.sqrt(p["d"] * psi_t()))
    elif theorem == "accel-sc":
        need("mu", "M_tilde", "L", "d")
        beta = p["mu"] * p["M_tilde"] * p["L"] ** 2 / (p["d"] * psi_t())
    else:
        raise PreconditionError(f"unknown smoothing rule {theorem!r}; expected one of {SMOOTHING_RULES}")
    if not beta > 1e-300 or not math.isfinite(beta):
        raise PreconditionError("smoothing parameter underflow")
    return beta
