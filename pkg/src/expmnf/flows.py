"""Planar and Sylvester flow layers with forward evaluation, log-determinant
Jacobians computed in the low-dimensional representation, and exact
reverse-mode gradients for all layer parameters.

Invertibility is enforced by reparameterization, never by clamping:

* Planar: the direction ``a`` is shifted along ``b`` so that the effective
  inner product ``ahat . b`` equals ``m(a . b)`` with
  ``m(x) = softplus(x + log(e - 1)) - 1``, a strictly increasing map onto
  (-1, inf) with ``m(0) = 0``.  Since tanh' lies in (0, 1], the determinant
  argument ``1 + (ahat . b) tanh'`` stays positive, and zero parameters give
  the identity map.
* Sylvester: the diagonals of the two triangular factors pass through tanh,
  so each diagonal product lies in (-1, 1) and ``1 + r_ii rhat_ii tanh'`` is
  positive for every input.

Gradients treat the reparameterizations and the Householder normalization as
part of the map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_M_SHIFT = np.log(np.e - 1.0)  # softplus(_M_SHIFT) == 1


def _softplus(x):
    return np.logaddexp(0.0, x)


# softplus(_M_SHIFT) is 1 mathematically but not in floating point; using the
# computed value keeps m(0) == 0 exact, so zero parameters give the exact
# identity map.
_M_AT_ZERO = _softplus(_M_SHIFT)


def _reparam_m(x):
    """Strictly increasing map onto (-1, inf) with m(0) = 0."""
    return _softplus(x + _M_SHIFT) - _M_AT_ZERO


def _reparam_m_prime(x):
    from scipy.special import expit

    return expit(x + _M_SHIFT)


def reparam_m_inverse(y):
    """Inverse of the planar invertibility map, for constructing matched layers."""
    if y <= -1.0:
        raise ValueError(f"m^-1 requires y > -1, got {y}")
    return np.log(np.expm1(y + _M_AT_ZERO)) - _M_SHIFT


@dataclass
class PlanarLayer:
    """Rank-1 residual flow z -> z + ahat * tanh(b . z + c)."""

    a: np.ndarray
    b: np.ndarray
    c: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.c = float(self.c)
        if self.a.ndim != 1 or self.a.shape != self.b.shape:
            raise ValueError(
                f"planar parameters must be equal-length vectors, got {self.a.shape} and {self.b.shape}"
            )

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.dim + 1

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.a, self.b, [self.c]])

    def set_flat(self, vec: np.ndarray) -> None:
        d = self.dim
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        self.a = vec[:d].copy()
        self.b = vec[d : 2 * d].copy()
        self.c = float(vec[2 * d])

    def _effective(self):
        dot = float(self.a @ self.b)
        beta2 = float(self.b @ self.b)
        if beta2 > 0.0:
            w = (_reparam_m(dot) - dot) / beta2
            ahat = self.a + w * self.b
        else:
            w = 0.0
            ahat = self.a.copy()
        return ahat, dot, beta2, w

    def forward(self, Z: np.ndarray):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.dim:
            raise ValueError(f"input batch has shape {Z.shape}, expected (N, {self.dim})")
        ahat, dot, beta2, w = self._effective()
        psi = float(ahat @ self.b)
        s = Z @ self.b + self.c
        t = np.tanh(s)
        hp = 1.0 - t * t
        theta = Z + np.outer(t, ahat)
        D = 1.0 + psi * hp
        logdet = np.log(D)
        cache = (Z, ahat, dot, beta2, w, psi, t, hp, D)
        return theta, logdet, cache

    def backward(self, cache, G: np.ndarray, L: np.ndarray):
        """Gradient of sum_i (G_i . theta_i + L_i logdet_i) w.r.t. (a, b, c, z)."""
        Z, ahat, dot, beta2, w, psi, t, hp, D = cache
        G = np.asarray(G, dtype=float)
        L = np.asarray(L, dtype=float)
        if G.shape != Z.shape or L.shape != (Z.shape[0],):
            raise ValueError("cotangent shapes do not match the forward batch")

        ld_coef = float(np.sum(L * hp / D))
        g_ahat = G.T @ t + ld_coef * self.b

        ag = G @ ahat
        hpp = -2.0 * t * hp
        q = ag * hp + L * psi * hpp / D  # cotangent on s, per sample
        g_b = Z.T @ q + ld_coef * ahat
        g_c = float(np.sum(q))
        g_z = G + np.outer(q, self.b)

        # chain through ahat = a + w(a, b) * b
        if beta2 > 0.0:
            mp = _reparam_m_prime(dot)
            bg = float(self.b @ g_ahat)
            g_a = g_ahat + ((mp - 1.0) / beta2) * bg * self.b
            g_b = g_b + w * g_ahat + bg * (
                ((mp - 1.0) / beta2) * self.a - (2.0 * w / beta2) * self.b
            )
        else:
            g_a = g_ahat

        return np.concatenate([g_a, g_b, [g_c]]), g_z

    def to_json(self) -> dict:
        return {
            "type": "planar",
            "dim": self.dim,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c,
        }


@dataclass
class SylvesterLayer:
    """Rank-m residual flow z -> z + A tanh(B z + c) with A = Q[R; 0],
    B = [Rhat, 0] Q^T, and Q a product of Householder reflections.

    ``r_raw`` / ``rhat_raw`` hold the upper-triangular factors with raw
    diagonals; effective diagonals are tanh of the raw values.
    """

    r_raw: np.ndarray
    rhat_raw: np.ndarray
    vs: np.ndarray  # (k, d) Householder vectors, k >= 0
    c: np.ndarray  # (m,)

    def __post_init__(self):
        self.r_raw = np.asarray(self.r_raw, dtype=float)
        self.rhat_raw = np.asarray(self.rhat_raw, dtype=float)
        self.vs = np.asarray(self.vs, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        m = self.r_raw.shape[0]
        if self.r_raw.shape != (m, m) or self.rhat_raw.shape != (m, m):
            raise ValueError("triangular factors must be square with equal shape")
        if self.vs.ndim != 2:
            raise ValueError("vs must be a (k, d) array")
        d = self.vs.shape[1]
        if m > d:
            raise ValueError(f"m={m} exceeds dimension d={d}")
        if self.c.shape != (m,):
            raise ValueError(f"offset must have shape ({m},), got {self.c.shape}")

    @property
    def dim(self) -> int:
        return self.vs.shape[1]

    @property
    def m(self) -> int:
        return self.r_raw.shape[0]

    @property
    def k(self) -> int:
        return self.vs.shape[0]

    @property
    def n_params(self) -> int:
        m = self.m
        return 2 * m * m + self.k * self.dim + m

    def get_flat(self) -> np.ndarray:
        return np.concatenate(
            [self.r_raw.ravel(), self.rhat_raw.ravel(), self.vs.ravel(), self.c]
        )

    def set_flat(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        m, k, d = self.m, self.k, self.dim
        i = 0
        self.r_raw = vec[i : i + m * m].reshape(m, m).copy()
        i += m * m
        self.rhat_raw = vec[i : i + m * m].reshape(m, m).copy()
        i += m * m
        self.vs = vec[i : i + k * d].reshape(k, d).copy()
        i += k * d
        self.c = vec[i : i + m].copy()

    def _effective(self):
        m = self.m
        r_diag = np.tanh(np.diag(self.r_raw))
        rhat_diag = np.tanh(np.diag(self.rhat_raw))
        R = np.triu(self.r_raw, 1) + np.diag(r_diag)
        Rhat = np.triu(self.rhat_raw, 1) + np.diag(rhat_diag)

        # Householder prefix products; Hs[j] = I - 2 vhat_j vhat_j^T
        d = self.dim
        norms = np.linalg.norm(self.vs, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("Householder vectors must be nonzero")
        vhats = self.vs / norms[:, None]
        Hs = [np.eye(d) - 2.0 * np.outer(v, v) for v in vhats]
        Q = np.eye(d)
        for H in Hs:
            Q = Q @ H
        Q1 = Q[:, :m]
        A = Q1 @ R
        B = Rhat @ Q1.T
        p = r_diag * rhat_diag  # diagonal of Rhat R
        return R, Rhat, r_diag, rhat_diag, vhats, norms, Hs, Q1, A, B, p

    def forward(self, Z: np.ndarray):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.dim:
            raise ValueError(f"input batch has shape {Z.shape}, expected (N, {self.dim})")
        eff = self._effective()
        R, Rhat, r_diag, rhat_diag, vhats, norms, Hs, Q1, A, B, p = eff
        S = Z @ B.T + self.c
        t = np.tanh(S)
        hp = 1.0 - t * t
        theta = Z + t @ A.T
        D = 1.0 + hp * p  # (N, m), positive by reparameterization
        logdet = np.sum(np.log(D), axis=1)
        cache = (Z, eff, t, hp, D)
        return theta, logdet, cache

    def backward(self, cache, G: np.ndarray, L: np.ndarray):
        Z, eff, t, hp, D = cache
        R, Rhat, r_diag, rhat_diag, vhats, norms, Hs, Q1, A, B, p = eff
        G = np.asarray(G, dtype=float)
        L = np.asarray(L, dtype=float)
        if G.shape != Z.shape or L.shape != (Z.shape[0],):
            raise ValueError("cotangent shapes do not match the forward batch")
        m, k, d = self.m, self.k, self.dim

        g_A = G.T @ t  # (d, m)
        ag = G @ A  # (N, m)
        hpp = -2.0 * t * hp
        q = ag * hp + (L[:, None] * p[None, :]) * hpp / D  # cotangent on S
        g_B = q.T @ Z  # (m, d)
        g_c = q.sum(axis=0)
        g_p = (L[:, None] * hp / D).sum(axis=0)  # (m,)
        g_z = G + q @ B

        # chain into the factor matrices and Q
        g_Q1 = g_A @ R.T + g_B.T @ Rhat
        g_R = Q1.T @ g_A
        g_Rhat = g_B @ Q1
        g_R[np.diag_indices(m)] += g_p * rhat_diag
        g_Rhat[np.diag_indices(m)] += g_p * r_diag

        # raw triangular params: strict upper passes through, diag through tanh
        g_r_raw = np.triu(g_R, 1)
        g_r_raw[np.diag_indices(m)] = np.diag(g_R) * (1.0 - r_diag**2)
        g_rhat_raw = np.triu(g_Rhat, 1)
        g_rhat_raw[np.diag_indices(m)] = np.diag(g_Rhat) * (1.0 - rhat_diag**2)

        # Householder chain: Q = H_1 ... H_k, grad H_j = P_j^T gQ S_j^T
        g_vs = np.zeros_like(self.vs)
        if k > 0:
            g_Q = np.zeros((d, d))
            g_Q[:, :m] = g_Q1
            prefixes = [np.eye(d)]
            for H in Hs[:-1]:
                prefixes.append(prefixes[-1] @ H)
            suffixes = [np.eye(d)]
            for H in reversed(Hs[1:]):
                suffixes.append(suffixes[-1] @ H.T)  # store transposed suffix product
            suffixes.reverse()
            # suffixes[j] == (H_{j+1} ... H_k)^T since each H is symmetric
            for j in range(k):
                g_H = prefixes[j].T @ g_Q @ suffixes[j]
                vhat = vhats[j]
                g_vhat = -2.0 * (g_H + g_H.T) @ vhat
                g_vs[j] = (g_vhat - (vhat @ g_vhat) * vhat) / norms[j]

        flat = np.concatenate([g_r_raw.ravel(), g_rhat_raw.ravel(), g_vs.ravel(), g_c])
        return flat, g_z

    def to_json(self) -> dict:
        return {
            "type": "sylvester",
            "dim": self.dim,
            "m": self.m,
            "k": self.k,
            "r_raw": self.r_raw.tolist(),
            "rhat_raw": self.rhat_raw.tolist(),
            "vs": self.vs.tolist(),
            "c": self.c.tolist(),
        }


def planar_forward(layer: PlanarLayer, z: np.ndarray):
    """Single-vector convenience wrapper: returns (theta, logdet)."""
    theta, logdet, _ = layer.forward(np.asarray(z, dtype=float)[None, :])
    return theta[0], float(logdet[0])


def sylvester_forward(layer: SylvesterLayer, z: np.ndarray):
    theta, logdet, _ = layer.forward(np.asarray(z, dtype=float)[None, :])
    return theta[0], float(logdet[0])


class FlowStack:
    """Ordered composition of flow layers sharing one dimension."""

    def __init__(self, layers):
        layers = list(layers)
        dims = {layer.dim for layer in layers}
        if len(dims) > 1:
            raise ValueError(f"layers disagree on dimension: {sorted(dims)}")
        self.layers = layers

    @property
    def dim(self) -> int:
        if not self.layers:
            raise ValueError("empty stack has no fixed dimension")
        return self.layers[0].dim

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def get_flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([layer.get_flat() for layer in self.layers])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        i = 0
        for layer in self.layers:
            layer.set_flat(vec[i : i + layer.n_params])
            i += layer.n_params

    def forward(self, Z: np.ndarray):
        """Compose layers over a batch. Returns (theta, logdet, caches)."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[0] == 0:
            raise ValueError(f"batch must be a nonempty (N, d) array, got shape {Z.shape}")
        theta = Z
        logdet = np.zeros(Z.shape[0])
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                theta, ld, cache = layer.forward(theta)
            except Exception as exc:
                raise ValueError(f"layer {i}: {exc}") from exc
            logdet = logdet + ld
            caches.append(cache)
        return theta, logdet, caches

    def backward(self, caches, dL_dtheta: np.ndarray, dL_dlogdet: np.ndarray) -> np.ndarray:
        """Reverse-mode gradient of sum_i (dL_dtheta_i . theta_i +
        dL_dlogdet_i * logdet_i) with respect to the flat parameter vector."""
        g_z = np.asarray(dL_dtheta, dtype=float)
        dL_dlogdet = np.asarray(dL_dlogdet, dtype=float)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            try:
                grads[i], g_z = self.layers[i].backward(caches[i], g_z, dL_dlogdet)
            except Exception as exc:
                raise ValueError(f"layer {i}: {exc}") from exc
        if not grads:
            return np.zeros(0)
        return np.concatenate(grads)

    def to_json(self) -> str:
        return json.dumps({"layers": [layer.to_json() for layer in self.layers]})

    @classmethod
    def from_json(cls, text: str) -> "FlowStack":
        spec = json.loads(text)
        layers = []
        for entry in spec["layers"]:
            if entry["type"] == "planar":
                layers.append(
                    PlanarLayer(np.array(entry["a"]), np.array(entry["b"]), entry["c"])
                )
            elif entry["type"] == "sylvester":
                layers.append(
                    SylvesterLayer(
                        np.array(entry["r_raw"]),
                        np.array(entry["rhat_raw"]),
                        np.array(entry["vs"]).reshape(entry["k"], entry["dim"]),
                        np.array(entry["c"]),
                    )
                )
            else:
                raise ValueError(f"unknown layer type {entry['type']!r}")
        return cls(layers)


INIT_SCALE = 0.01  # near-identity initialization keeps early training stable


def init_planar_stack(rng: np.random.Generator, d: int, n_layers: int) -> FlowStack:
    layers = []
    for _ in range(n_layers):
        a = rng.normal(0.0, INIT_SCALE, size=d)
        b = rng.normal(0.0, INIT_SCALE, size=d)
        layers.append(PlanarLayer(a, b, 0.0))
    return FlowStack(layers)


def init_sylvester_stack(
    rng: np.random.Generator, d: int, m: int, k: int, n_layers: int
) -> FlowStack:
    layers = []
    for _ in range(n_layers):
        r = rng.normal(0.0, INIT_SCALE, size=(m, m))
        rhat = rng.normal(0.0, INIT_SCALE, size=(m, m))
        vs = rng.normal(0.0, 1.0, size=(k, d))  # directions only; scale irrelevant
        layers.append(SylvesterLayer(r, rhat, vs, np.zeros(m)))
    return FlowStack(layers)
