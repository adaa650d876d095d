"""Closed-form privacy calibration, composition, amplification and the
per-round budget ledger.

Every function is pure. Functions with a validity range raise
:class:`~ldpfl.core.PreconditionError` outside it unless called with
``unsafe=True``, which downgrades the check to a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import PreconditionError

MODES = ("mbsgd-advanced-composition", "onepass-parallel", "sdp-shuffled", "experiment-grade")

# Default absolute constant for the shuffled plan. Chaining the Gaussian
# randomizer 8L^2 ln(2/d)/e0^2, the small-eps single-round shuffle bound
# e ~ 4 sqrt(e) e0 sqrt(ln(4/d)/M), the 2eK/n subsampling factor and the
# R-round split e/(2 sqrt(2R ln(1/d))) gives e0 = e n N / (16 sqrt(2e) sqrt(R M logs)),
# hence C = 8 (16 sqrt(2e))^2 = 4096 e.
SDP_DEFAULT_CONSTANT = 4096.0 * math.e


def _require(ok: bool, message: str, unsafe: bool = False) -> None:
    if ok:
        return
    if unsafe:
        warnings.warn(f"precondition overridden: {message}", RuntimeWarning, stacklevel=3)
        return
    raise PreconditionError(message)


def _check_delta(delta: float, name: str = "delta") -> None:
    if not 0 < delta < 1:
        raise PreconditionError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class NoisePlan:
    """Per-client Gaussian variance and the batch size it was calibrated for."""

    sigma_sq: float
    K_min: int
    R: int
    mode: str
    inputs: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown plan mode {self.mode!r}")
        if self.sigma_sq < 0 or not math.isfinite(self.sigma_sq):
            raise ValueError("sigma_sq must be finite and non-negative")
        if self.K_min < 1:
            raise ValueError("K_min must be at least 1")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)

    def as_lines(self) -> list:
        lines = [f"mode={self.mode}", f"sigma_sq={self.sigma_sq!r}", f"K_min={self.K_min}", f"R={self.R}"]
        lines += [f"{k}={v!r}" for k, v in self.inputs]
        return lines


def gaussian_sigma_sq(L: float, K: int, eps: float, delta: float, *, unsafe: bool = False) -> float:
    """Variance making one K-sample mean gradient (eps, delta)-DP.

    The L2 sensitivity of a mean of K L-Lipschitz gradients under a one-sample
    swap is 2L/K.
    """
    _require(0 < eps <= 1, "inner ε exceeds Gaussian-mechanism range (need 0 < eps <= 1)", unsafe)
    _check_delta(delta)
    if K < 1:
        raise PreconditionError("K must be at least 1")
    if L == 0:
        return 0.0
    return 8.0 * (2.0 * L / K) ** 2 * math.log(1.25 / delta) / eps**2


def advanced_composition_split(eps0: float, delta0: float, R: int, *, unsafe: bool = False):
    """Per-round (eps, delta) so that R adaptive rounds compose to (eps0, delta0)."""
    _check_delta(delta0, "delta0")
    if R < 1:
        raise PreconditionError("R must be at least 1")
    _require(0 < eps0 <= 2 * math.log(2 / delta0), "eps0 must satisfy 0 < eps0 <= 2 ln(2/delta0)", unsafe)
    eps_t = eps0 / (2.0 * math.sqrt(2.0 * R * math.log(2.0 / delta0)))
    return eps_t, delta0 / (2.0 * R)


def advanced_composition(eps: float, delta: float, R: int, delta_slack: float):
    """Standard advanced composition of R (eps, delta) mechanisms."""
    _check_delta(delta_slack, "delta_slack")
    total = math.sqrt(2.0 * R * math.log(1.0 / delta_slack)) * eps + R * eps * math.expm1(eps)
    return total, R * delta + delta_slack


def subsample_amplify(eps: float, K: int, n: int, *, unsafe: bool = False) -> float:
    """Budget after drawing K of n samples uniformly with replacement."""
    if K > n:
        raise PreconditionError(f"batch K={K} exceeds sample count n={n}")
    if K < 1 or n < 1:
        raise PreconditionError("K and n must be positive")
    _require(0 <= eps <= 1, "subsampling bound needs eps <= 1", unsafe)
    return 2.0 * eps * K / n


def mbsgd_noise_plan(L: float, n: int, eps0: float, delta0: float, R: int, *, unsafe: bool = False) -> NoisePlan:
    _check_delta(delta0, "delta0")
    if R < 1 or n < 1:
        raise PreconditionError("R and n must be positive")
    _require(0 < eps0 <= 2 * math.log(2 / delta0), "eps0 must satisfy 0 < eps0 <= 2 ln(2/delta0)", unsafe)
    log_a = math.log(2.5 * R / delta0)
    log_b = math.log(2.0 / delta0)
    sigma_sq = 256.0 * L**2 * R * log_a * log_b / (n**2 * eps0**2)
    K_min = max(1, math.ceil(eps0 * n / (4.0 * math.sqrt(2.0 * R * log_b))))
    return NoisePlan(sigma_sq, K_min, R, "mbsgd-advanced-composition",
                     (("L", L), ("n", n), ("eps0", eps0), ("delta0", delta0)))


def onepass_noise_plan(L: float, K: int, eps0: float, delta0: float, n: Optional[int] = None,
                       *, unsafe: bool = False) -> NoisePlan:
    """Plan for disjoint batches; each sample is touched once, so rounds compose in parallel.

    ``R`` is floor(n/K) when ``n`` is given, else 1.
    """
    _check_delta(delta0, "delta0")
    if K < 1:
        raise PreconditionError("K must be at least 1")
    _require(0 < eps0 <= 8 * math.log(1 / delta0), "eps0 must satisfy 0 < eps0 <= 8 ln(1/delta0)", unsafe)
    if n is not None and K > n:
        raise PreconditionError(f"batch K={K} exceeds sample count n={n}")
    sigma_sq = 32.0 * L**2 * math.log(1.25 / delta0) / (eps0**2 * K**2)
    R = 1 if n is None else n // K
    return NoisePlan(sigma_sq, K, R, "onepass-parallel",
                     (("L", L), ("n", n), ("eps0", eps0), ("delta0", delta0)))


def experiment_noise_plan(L: float, n: int, eps: float, delta: float, R: int) -> NoisePlan:
    """The lighter calibration used for the benchmark experiments."""
    _check_delta(delta)
    if not eps > 0 or R < 1:
        raise PreconditionError("eps and R must be positive")
    K_raw = n * math.sqrt(eps) / (2.0 * math.sqrt(R))
    if K_raw < 1e-12 or math.ceil(K_raw) < 1:
        raise PreconditionError("n too small for this (ε, R)")
    sigma_sq = 8.0 * L**2 * math.log(1.0 / delta) * R / (n**2 * eps**2)
    return NoisePlan(sigma_sq, math.ceil(K_raw), R, "experiment-grade",
                     (("L", L), ("n", n), ("eps", eps), ("delta", delta)))


def sdp_noise_plan(L: float, n: int, N: int, M: int, eps: float, delta: float, R: int,
                   C_const: float = SDP_DEFAULT_CONSTANT, *, unsafe: bool = False) -> NoisePlan:
    _check_delta(delta)
    if min(n, N, M, R) < 1:
        raise PreconditionError("n, N, M and R must be positive")
    _require(0 < eps <= math.log(2 / delta), "eps must satisfy 0 < eps <= ln(2/delta)", unsafe)
    m_floor = 16.0 * math.log(18.0 * R * M**2 / (N * delta))
    _require(M >= m_floor, f"M={M} below required 16 ln(18RM^2/(N delta)) = {m_floor:.4g}", unsafe)
    logs = math.log(R * M**2 / (N * delta)) * math.log(R / delta) * math.log(1.0 / delta)
    sigma_sq = C_const * L**2 * R * M * logs / (n**2 * N**2 * eps**2)
    return NoisePlan(max(sigma_sq, 0.0), 1, R, "sdp-shuffled",
                     (("L", L), ("n", n), ("N", N), ("M", M), ("eps", eps), ("delta", delta), ("C", C_const)))


def shuffle_amplify_round(eps0_r: float, delta0_r: float, n: int, N: int, delta_r: float,
                          *, unsafe: bool = False):
    """Central (eps, delta) of one shuffled round of N clients with n samples each.

    Returns ``(eps_r, delta_tilde_r)``.
    """
    if n < 1 or N < 1:
        raise PreconditionError("n and N must be positive")
    _check_delta(delta_r, "delta_r")
    if eps0_r < 0 or not 0 <= delta0_r < 1:
        raise PreconditionError("per-round budget out of range")
    ln2d = math.log(2.0 / delta_r)
    eps_cap = math.log(N / (16.0 * ln2d)) / n if N > 16.0 * ln2d else -math.inf
    _require(eps0_r <= eps_cap, f"eps0_r={eps0_r} exceeds ln(N/(16 ln(2/delta_r)))/n = {eps_cap:.6g}", unsafe)
    floor = 2.0 * math.exp(-N * math.exp(-n * eps0_r) / 16.0)
    _require(delta_r >= floor, f"delta_r={delta_r} below 2 exp(-N e^(-n eps0)/16) = {floor:.6g}", unsafe)
    growth = math.exp(n * eps0_r)
    inner = 8.0 * math.sqrt(growth * math.log(4.0 / delta_r)) / math.sqrt(N) + 8.0 * growth / N
    eps_r = math.log1p(math.tanh(eps0_r / 2.0) * inner)
    delta_t = delta_r + 2.0 * N * n * math.exp((n - 1) * eps0_r) * delta0_r
    return eps_r, delta_t


@dataclass(frozen=True)
class PrivacyLedger:
    """Per-round randomizer budgets of one client, with the overall target."""

    rounds: tuple
    target_eps0: float
    target_delta0: float = 0.0

    def __post_init__(self):
        rounds = tuple((float(e), float(d)) for e, d in self.rounds)
        for r, (e, d) in enumerate(rounds):
            if e < 0 or not 0 <= d < 1:
                raise PreconditionError(f"round {r}: budget ({e}, {d}) out of range")
        object.__setattr__(self, "rounds", rounds)

    @classmethod
    def uniform(cls, R: int, eps_r: float, delta_r: float, target_eps0: float, target_delta0: float = 0.0):
        return cls(((eps_r, delta_r),) * R, target_eps0, target_delta0)

    @property
    def R(self) -> int:
        return len(self.rounds)

    def dumps(self) -> str:
        head = f"# target_eps0 {self.target_eps0!r}\n# target_delta0 {self.target_delta0!r}\n"
        return head + "".join(f"{e!r} {d!r}\n" for e, d in self.rounds)

    @classmethod
    def loads(cls, text: str, target_eps0: Optional[float] = None, target_delta0: Optional[float] = None):
        rounds = []
        meta = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] in ("target_eps0", "target_delta0"):
                    meta[parts[0]] = float(parts[1])
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'eps0_r delta0_r'")
            rounds.append((float(parts[0]), float(parts[1])))
        te = target_eps0 if target_eps0 is not None else meta.get("target_eps0")
        if te is None:
            te = math.sqrt(sum(e * e for e, _ in rounds)) or 1.0
        td = target_delta0 if target_delta0 is not None else meta.get("target_delta0", 0.0)
        return cls(tuple(rounds), te, td)

    @classmethod
    def read(cls, path, **kw):
        return cls.loads(Path(path).read_text(encoding="utf-8"), **kw)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def shuffle_amplify_ledger(ledger: PrivacyLedger, n: int, N: int, delta_prime: Optional[float] = None,
                           *, unsafe: bool = False):
    """Central budget of the shuffled protocol over every round in the ledger.

    Round r is run at delta^r = N n delta0^r. ``delta_prime`` is the slack of
    the final composition; by default it equals the summed per-round deltas,
    i.e. half of the returned total.
    """
    eps_sq = 0.0
    delta_sum = 0.0
    for r, (e0, d0) in enumerate(ledger.rounds):
        try:
            _require(e0 <= 1.0 / n, f"eps0_r={e0} exceeds 1/n", unsafe)
            if d0 <= 0:
                raise PreconditionError("delta0_r must be positive to set delta_r = N n delta0_r")
            eps_r, d_t = shuffle_amplify_round(e0, d0, n, N, N * n * d0, unsafe=unsafe)
        except PreconditionError as exc:
            raise PreconditionError(f"round {r}: {exc}") from None
        eps_sq += eps_r**2
        delta_sum += d_t
    if delta_prime is None:
        delta_prime = delta_sum
    if eps_sq == 0.0:
        return 0.0, delta_prime + delta_sum
    _check_delta(delta_prime, "delta_prime")
    eps = 2.0 * eps_sq + math.sqrt(2.0 * eps_sq * math.log(1.0 / delta_prime))
    return eps, delta_prime + delta_sum


def compositionality_constant(ledger: PrivacyLedger) -> float:
    if not ledger.target_eps0 > 0:
        raise PreconditionError("target_eps0 must be positive")
    return math.sqrt(math.fsum(e * e for e, _ in ledger.rounds)) / ledger.target_eps0


def group_privacy_userlevel(eps0: float, delta0: float, n: int):
    """Sample-level (eps0, delta0) lifted to a whole n-sample user."""
    if n < 1:
        raise PreconditionError("n must be at least 1")
    return n * eps0, n * math.exp((n - 1) * eps0) * delta0


def mbsgd_ledger(eps0: float, delta0: float, R: int, *, unsafe: bool = False) -> PrivacyLedger:
    eps_t, delta_t = advanced_composition_split(eps0, delta0, R, unsafe=unsafe)
    return PrivacyLedger.uniform(R, eps_t, delta_t, eps0, delta0)


def psi(L: float, n: int, eps: float, delta: float, R: int) -> float:
    """Per-client noise scale (L/(n eps))^2 ln(2.5R/delta) ln(2/delta)."""
    return (L / (n * eps)) ** 2 * math.log(2.5 * R / delta) * math.log(2.0 / delta)


def xi(n: int, eps: float, delta: float, R: int) -> float:
    return psi(1.0, n, eps, delta, R)


def delta_rule(expr: str, n: int) -> float:
    """Evaluate a delta formula such as ``1/n^2`` at sample count n."""
    allowed = set("0123456789.+-*/()^ en")
    if not set(expr) <= allowed:
        raise ValueError(f"bad delta rule {expr!r}")
    return float(eval(expr.replace("^", "**"), {"__builtins__": {}}, {"n": n, "e": math.e}))

