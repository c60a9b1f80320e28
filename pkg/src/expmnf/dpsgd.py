"""DPSGD baseline: Poisson-sampled minibatches, per-example gradient clipping,
Gaussian noising, a Renyi-DP accountant for the subsampled Gaussian mechanism,
and a bisection solver for the noise multiplier.

The accountant follows the standard subsampled-Gaussian analysis: the
alpha-Renyi divergence of one step is computed exactly for integer orders via
a binomial expansion and via a converging two-sided series for fractional
orders; composition over steps is linear in Renyi space, and the (eps, delta)
bound is minimized over an order grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InfeasibleTargetError


@dataclass
class DpsgdConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    sampling_rate: float = 0.01
    steps: int = 1
    delta: float = 1e-5
    learning_rate: float = 0.1
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0.0:
            raise ValueError("noise_multiplier must be >= 0")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must lie in (0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


def clip_per_example(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``grad`` to l2 norm at most ``clip_norm``."""
    if clip_norm <= 0.0:
        raise ValueError("clip_norm must be positive")
    norm = float(np.linalg.norm(grad))
    if norm <= clip_norm:
        return np.asarray(grad, dtype=float)
    return np.asarray(grad, dtype=float) * (clip_norm / norm)


def _clip_rows(G: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.linalg.norm(G, axis=1)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return G * scale[:, None]


def poisson_sample(rng: np.random.Generator, n_rows: int, q: float) -> np.ndarray:
    """Independent row inclusion with probability q."""
    return np.flatnonzero(rng.random(n_rows) < q)


def _per_example_l2_grads(theta, X, y, w, bias=True):
    from scipy.special import expit

    Xb = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1) if bias else X
    yhat = expit(Xb @ theta)
    coef = 2.0 * w * (yhat - y) * yhat * (1.0 - yhat)
    return coef[:, None] * Xb


def dpsgd_step(
    theta: np.ndarray,
    batch_grads: np.ndarray,
    config: DpsgdConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """One noisy clipped-gradient step on an already-sampled batch.

    ``batch_grads`` holds the per-example gradients (rows); an empty batch
    yields a pure-noise step with divisor 1.
    """
    batch_grads = np.atleast_2d(np.asarray(batch_grads, dtype=float))
    if batch_grads.size and batch_grads.shape[1] != theta.shape[0]:
        raise ValueError("gradient width does not match parameter dimension")
    n = batch_grads.shape[0] if batch_grads.size else 0
    total = _clip_rows(batch_grads, config.clip_norm).sum(axis=0) if n else np.zeros_like(theta)
    noise = rng.standard_normal(theta.shape[0]) * (config.noise_multiplier * config.clip_norm)
    return theta - config.learning_rate * (total + noise) / max(1, n)


def train_dpsgd(X, y, w, config: DpsgdConfig, bias: bool = True, theta0=None):
    """Train logistic regression with l2 loss under DPSGD. Returns theta."""
    from .numerics import substream

    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    p = X.shape[1] + (1 if bias else 0)
    rng = substream(config.seed, "dpsgd")
    theta = np.zeros(p) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    velocity = np.zeros(p)
    for _ in range(config.steps):
        rows = poisson_sample(rng, X.shape[0], config.sampling_rate)
        if rows.size:
            grads = _per_example_l2_grads(theta, X[rows], y[rows], w[rows], bias=bias)
            total = _clip_rows(grads, config.clip_norm).sum(axis=0)
        else:
            total = np.zeros(p)
        noise = rng.standard_normal(p) * (config.noise_multiplier * config.clip_norm)
        update = (total + noise) / max(1, rows.size)
        if config.momentum > 0.0:
            velocity = config.momentum * velocity + update
            update = velocity
        theta = theta - config.learning_rate * update
    return theta


# --- RDP accountant ---------------------------------------------------------

def default_orders() -> np.ndarray:
    fractional = np.arange(1.25, 64.0 + 1e-9, 0.25)
    integers = np.arange(2.0, 513.0)
    return np.unique(np.concatenate([fractional, integers]))


def _log_add(x: float, y: float) -> float:
    a, b = min(x, y), max(x, y)
    if a == -math.inf:
        return b
    return b + math.log1p(math.exp(a - b))


def _log_comb(n: float, k: float) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_erfc(x: float) -> float:
    return float(special.log_ndtr(-x * 2**0.5)) + math.log(2.0)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    log1mq = math.log1p(-q)
    for i in range(alpha + 1):
        term = (
            _log_comb(alpha, i)
            + i * math.log(q)
            + (alpha - i) * log1mq
            + (i * i - i) / (2.0 * sigma**2)
        )
        log_a = _log_add(log_a, term)
    return log_a


_MAX_FRAC_TERMS = 1000


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    log_a0 = log_a1 = -math.inf
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    log1mq = math.log1p(-q)
    last0 = last1 = -math.inf
    i = 0
    while i < _MAX_FRAC_TERMS:
        j = alpha - i
        log_coef = _log_comb(alpha, i)
        log_t0 = log_coef + i * math.log(q) + j * log1mq
        log_t1 = log_coef + j * math.log(q) + i * log1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma**2) + log_e1
        log_a0 = _log_add(log_a0, log_s0)
        log_a1 = _log_add(log_a1, log_s1)
        total = _log_add(log_a0, log_a1)
        if log_s0 < last0 and log_s1 < last1 and max(log_s0, log_s1) < total - 30.0:
            return total
        last0, last1 = log_s0, log_s1
        i += 1
    return _log_add(log_a0, log_a1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Per-step alpha-RDP of the Poisson-subsampled Gaussian mechanism."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if alpha <= 1.0:
        raise ValueError("alpha must exceed 1")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(0.0, log_a / (alpha - 1.0))


def rdp_epsilon_detail(q: float, sigma: float, steps: int, delta: float, orders=None):
    """(epsilon, best_alpha) for ``steps`` compositions at slack ``delta``."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if steps == 0:
        return 0.0, None
    if sigma <= 0.0:
        raise InfeasibleTargetError("sigma = 0 with steps > 0 admits no finite privacy bound")
    orders = default_orders() if orders is None else np.asarray(orders, dtype=float)
    best_eps, best_alpha = math.inf, None
    rises = 0
    for alpha in orders:
        eps = steps * rdp_subsampled_gaussian(q, sigma, float(alpha)) + math.log(1.0 / delta) / (
            alpha - 1.0
        )
        if eps < best_eps:
            best_eps, best_alpha = eps, float(alpha)
            rises = 0
        else:
            # the objective is unimodal in alpha (RDP term rises, delta term
            # falls); a sustained rise means the minimum is behind us
            rises += 1
            if rises >= 16:
                break
    return best_eps, best_alpha


def rdp_epsilon(q: float, sigma: float, steps: int, delta: float, orders=None) -> float:
    return rdp_epsilon_detail(q, sigma, steps, delta, orders)[0]


SIGMA_BRACKET = (1e-2, 1e5)
SOLVE_REL_TOL = 1e-3


def solve_noise_multiplier(target_eps: float, delta: float, q: float, steps: int) -> float:
    """Smallest sigma (within tolerance) whose accountant epsilon lands in
    [target_eps * (1 - 1e-3), target_eps]."""
    if target_eps <= 0.0:
        raise ValueError("target_eps must be positive")
    lo, hi = SIGMA_BRACKET
    eps_hi = rdp_epsilon(q, hi, steps, delta)
    if eps_hi > target_eps:
        raise InfeasibleTargetError(
            f"target epsilon {target_eps:g} is below the accountant floor "
            f"{eps_hi:g} for q={q:g}, steps={steps}, delta={delta:g}"
        )
    eps_lo = rdp_epsilon(q, lo, steps, delta)
    if eps_lo <= target_eps:
        return lo
    for _ in range(200):
        mid = math.sqrt(lo * hi)  # sigma spans decades; bisect in log space
        eps_mid = rdp_epsilon(q, mid, steps, delta)
        if target_eps * (1.0 - SOLVE_REL_TOL) <= eps_mid <= target_eps:
            return mid
        if eps_mid > target_eps:
            lo = mid
        else:
            hi = mid
    raise InfeasibleTargetError(
        f"bisection failed to bracket target epsilon {target_eps:g} within tolerance"
    )
