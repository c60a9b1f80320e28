"""Reverse-KL training of a flow stack against an ExpM target: RMSProp with a
reduce-on-plateau scheduler, deterministic under the run seed, plus forward
sampling of private model parameters from the trained stack."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .flows import FlowStack
from .numerics import sample_gaussian, substream
from .target import ExpMTarget

RMSPROP_ALPHA = 0.99
RMSPROP_EPS = 1e-8
PLATEAU_REL_THRESHOLD = 1e-4


@dataclass
class TrainConfig:
    steps: int = 1000
    nf_batch: int = 100
    data_batch: int | None = None
    learning_rate: float = 1e-2
    momentum: float = 0.0
    weight_decay: float = 0.0
    scheduler_patience: int = 1000
    scheduler_factor: float = 0.5
    sigma2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.nf_batch < 1:
            raise ValueError("nf_batch must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.sigma2 <= 0.0:
            raise ValueError("sigma2 must be positive")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("scheduler_factor must lie in (0, 1)")
        if self.scheduler_patience < 1:
            raise ValueError("scheduler_patience must be >= 1")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    ms: list = field(default_factory=list)

    def append(self, loss: float, lr: float, ms: float) -> None:
        self.loss.append(loss)
        self.lr.append(lr)
        self.ms.append(ms)

    def __len__(self) -> int:
        return len(self.loss)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,loss,lr,ms\n")
            for i, (l, r, m) in enumerate(zip(self.loss, self.lr, self.ms)):
                fh.write(f"{i},{l!r},{r!r},{m!r}\n")


def gaussian_log_density(Z: np.ndarray, sigma2: float) -> np.ndarray:
    """log N(0, sigma2 I) per row."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    d = Z.shape[1]
    return -0.5 * np.sum(Z * Z, axis=1) / sigma2 - 0.5 * d * np.log(2.0 * np.pi * sigma2)


def rkl_loss(stack: FlowStack, sigma2: float, target: ExpMTarget, Z: np.ndarray, rows=None):
    """Monte-Carlo reverse-KL estimate and the cotangents for stack.backward.

    Returns (loss, dL_dtheta, dL_dlogdet, theta, caches).  The base-density
    term is included in the reported loss but is a constant in the flow
    parameters, so it contributes no gradient.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = Z.shape[0]
    theta, logdet, caches = stack.forward(Z)
    log_pz = gaussian_log_density(Z, sigma2)
    log_pstar = target.log_unnorm(theta, rows=rows)
    loss = float(np.mean(log_pz - log_pstar - logdet))
    dL_dtheta = -target.log_unnorm_grad(theta, rows=rows) / n
    dL_dlogdet = np.full(n, -1.0 / n)
    return loss, dL_dtheta, dL_dlogdet, theta, caches


@dataclass
class RmsPropState:
    v: np.ndarray
    buf: np.ndarray | None = None

    @classmethod
    def fresh(cls, n: int, momentum: float = 0.0) -> "RmsPropState":
        return cls(v=np.zeros(n), buf=np.zeros(n) if momentum > 0.0 else None)


def rmsprop_update(
    param: np.ndarray,
    state: RmsPropState,
    grad: np.ndarray,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    alpha: float = RMSPROP_ALPHA,
    eps: float = RMSPROP_EPS,
):
    """One RMSProp step; returns (new_param, state). State arrays are updated
    in place."""
    if grad.shape != param.shape or state.v.shape != param.shape:
        raise ValueError("parameter/gradient/state shapes disagree")
    g = grad + weight_decay * param if weight_decay else grad
    state.v *= alpha
    state.v += (1.0 - alpha) * g * g
    scaled = g / (np.sqrt(state.v) + eps)
    if momentum > 0.0:
        if state.buf is None:
            state.buf = np.zeros_like(param)
        state.buf *= momentum
        state.buf += scaled
        step = lr * state.buf
    else:
        step = lr * scaled
    return param - step, state


@dataclass
class PlateauScheduler:
    """Reduce the learning rate by ``factor`` after ``patience`` consecutive
    steps without relative improvement beyond PLATEAU_REL_THRESHOLD."""

    lr: float
    patience: int
    factor: float
    best: float = np.inf
    bad_steps: int = 0

    def step(self, loss: float) -> float:
        if not np.isfinite(self.best) or loss < self.best - abs(self.best) * PLATEAU_REL_THRESHOLD:
            self.best = loss
            self.bad_steps = 0
        else:
            self.bad_steps += 1
            if self.bad_steps >= self.patience:
                self.lr *= self.factor
                self.bad_steps = 0
        return self.lr


class _MinibatchCycler:
    """Deterministic row minibatches, reshuffled each pass through the data."""

    def __init__(self, n_rows: int, batch: int, rng: np.random.Generator):
        self.n_rows = n_rows
        self.batch = min(batch, n_rows)
        self.rng = rng
        self.order = rng.permutation(n_rows)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n_rows:
            self.order = self.rng.permutation(self.n_rows)
            self.pos = 0
        rows = self.order[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return rows


def train_nf(stack: FlowStack, target: ExpMTarget, config: TrainConfig):
    """Reverse-KL training loop. Returns (stack, TrainHistory); the input
    stack is mutated in place."""
    history = TrainHistory()
    if config.steps == 0:
        return stack, history
    d = target.dim
    if stack.dim != d:
        raise ValueError(f"stack dimension {stack.dim} does not match target dimension {d}")

    z_rng = substream(config.seed, "base-samples")
    data_rng = substream(config.seed, "data-batches")
    batcher = None
    data_batch = config.data_batch if config.data_batch is not None else target.data_batch
    if data_batch is not None and data_batch < target.n_rows:
        batcher = _MinibatchCycler(target.n_rows, data_batch, data_rng)

    params = stack.get_flat()
    state = RmsPropState.fresh(params.size, config.momentum)
    sched = PlateauScheduler(
        lr=config.learning_rate, patience=config.scheduler_patience, factor=config.scheduler_factor
    )

    for step in range(config.steps):
        t0 = time.perf_counter()
        Z = sample_gaussian(z_rng, config.nf_batch, d, config.sigma2)
        rows = batcher.next() if batcher is not None else None
        try:
            loss, g_theta, g_logdet, _, caches = rkl_loss(stack, config.sigma2, target, Z, rows)
        except NumericError as exc:
            raise NumericError(
                f"training aborted at step {step}: {exc} "
                f"(lr={sched.lr:g}, |params|={np.max(np.abs(params)):g})",
                where=step,
            ) from exc
        if not np.isfinite(loss):
            raise NumericError(
                f"training aborted at step {step}: non-finite loss "
                f"(lr={sched.lr:g}, |params|={np.max(np.abs(params)):g})",
                where=step,
            )
        grad = stack.backward(caches, g_theta, g_logdet)
        params, state = rmsprop_update(
            params, state, grad, sched.lr, config.momentum, config.weight_decay
        )
        stack.set_flat(params)
        lr = sched.step(loss)
        history.append(loss, lr, (time.perf_counter() - t0) * 1e3)
    return stack, history


def sample_model(
    stack: FlowStack, sigma2: float, rng: np.random.Generator, n_samples: int
) -> np.ndarray:
    """Forward-only sampling of private model parameters from the trained flow."""
    Z = sample_gaussian(rng, n_samples, stack.dim, sigma2)
    theta, _, _ = stack.forward(Z)
    return theta


def train_logistic(
    X,
    y,
    w=None,
    bias: bool = True,
    steps: int = 2000,
    learning_rate: float = 0.05,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    scheduler_patience: int = 1000,
    scheduler_factor: float = 0.5,
    seed: int = 0,
) -> np.ndarray:
    """Non-private full-batch logistic regression on l2 loss with RMSProp and
    the plateau scheduler; the baseline the private methods are compared to."""
    from .target import l2_loss, l2_loss_grad

    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = X.shape[1] + (1 if bias else 0)
    rng = substream(seed, "nonprivate-init")
    theta = rng.normal(0.0, 0.01, size=p)
    state = RmsPropState.fresh(p, momentum)
    sched = PlateauScheduler(lr=learning_rate, patience=scheduler_patience, factor=scheduler_factor)
    for _ in range(steps):
        grad = l2_loss_grad(theta, X, y, w, bias=bias)
        theta, state = rmsprop_update(theta, state, grad, sched.lr, momentum, weight_decay)
        sched.step(l2_loss(theta, X, y, w, bias=bias))
    return theta
