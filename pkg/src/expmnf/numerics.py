"""Dense linear-algebra helpers, seeded random streams, and the
finite-difference gradient oracle used by every other module.

Random streams use the counter-based Philox generator. Sub-streams are
derived from a run seed plus a path of labels (e.g. seed -> model index ->
"base-samples") via ``numpy.random.SeedSequence``, so independent components
never share a stream and every draw is reproducible from (seed, path).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

RNG_ALGORITHM = "philox-4x64"


def substream(seed: int, *path) -> np.random.Generator:
    """Derive an independent generator from a run seed and a label path.

    Labels may be ints or strings; strings are hashed into the seed entropy
    deterministically (not via Python's salted ``hash``).
    """
    keys = [int(seed)]
    for p in path:
        if isinstance(p, str):
            keys.extend(p.encode("utf-8"))
        else:
            keys.append(int(p))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(keys)))


def sample_gaussian(rng: np.random.Generator, n: int, d: int, sigma2: float) -> np.ndarray:
    """Draw an (n, d) matrix of i.i.d. N(0, sigma2) entries."""
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    if n <= 0 or d <= 0:
        raise ValueError(f"dimensions must be positive, got n={n}, d={d}")
    return rng.standard_normal((n, d)) * np.sqrt(sigma2)


def householder_product(vs, d: int | None = None) -> np.ndarray:
    """Orthogonal Q as the product of reflections I - 2 v v^T (v normalized).

    With an empty list the product is the identity, so ``d`` is required in
    that case.
    """
    vs = [np.asarray(v, dtype=float) for v in vs]
    if d is None:
        if not vs:
            raise ValueError("d is required when no reflection vectors are given")
        d = vs[0].shape[0]
    Q = np.eye(d)
    for i, v in enumerate(vs):
        if v.shape != (d,):
            raise ValueError(f"reflection vector {i} has shape {v.shape}, expected ({d},)")
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValueError(f"reflection vector {i} is zero")
        vhat = v / norm
        # Q <- Q @ (I - 2 vhat vhat^T), without forming the reflection matrix
        Q -= 2.0 * np.outer(Q @ vhat, vhat)
    return Q


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, component by component."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at component {i}", where=i)
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
