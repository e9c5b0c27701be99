"""Forward diffusion engine: Euler paths, first-variation flow, flow inverse.

Simulates dX = b(t, X) dt + sigma(t, X) dW together with the matrix flow
dG = grad_b G dt + grad_sigma G dW started at the identity, and inverts the
flow node by node (dimensions stay small, so direct inversion beats
simulating the inverse flow).  The Brownian-perturbation derivative of X is
assembled from the flow as G_t G_u^{-1} sigma(u, X_u).

Coefficients come from a preset registry, keeping configs data-only.
Randomness is counter-based: path i draws from a Philox stream keyed by
(seed, i), so bundles are reproducible independently of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "SdeCoefficients",
    "ForwardBundle",
    "make_forward",
    "brownian_increments",
    "euler_paths",
    "simulate_forward",
    "malliavin_forward",
    "FORWARD_PRESETS",
]


@dataclass(frozen=True)
class SdeCoefficients:
    """Drift, diffusion and their spatial gradients, vectorized over paths.

    Shapes with a batch of M states x of shape (M, d):
      drift -> (M, d); diffusion -> (M, d, d);
      grad_drift -> (M, d, d) with [., j, l] = d b_j / d x_l;
      grad_diffusion -> (M, d, d, d) with [., j, k, l] = d sigma_jk / d x_l.
    """

    name: str
    dim: int
    drift: Callable
    diffusion: Callable
    grad_drift: Callable
    grad_diffusion: Callable


def _brownian(params, dim):
    def drift(t, x):
        return np.zeros_like(x)

    def diffusion(t, x):
        m = len(x)
        return np.broadcast_to(np.eye(dim), (m, dim, dim)).copy()

    def grad_drift(t, x):
        return np.zeros((len(x), dim, dim))

    def grad_diffusion(t, x):
        return np.zeros((len(x), dim, dim, dim))

    return SdeCoefficients("brownian", dim, drift, diffusion, grad_drift, grad_diffusion)


def _gbm(params, dim):
    if dim != 1:
        raise ValueError("gbm preset is one-dimensional")
    mu = float(params.get("mu", 0.0))
    nu = float(params.get("nu", 0.0))

    def drift(t, x):
        return mu * x

    def diffusion(t, x):
        return nu * x[:, :, None]

    def grad_drift(t, x):
        return np.full((len(x), 1, 1), mu)

    def grad_diffusion(t, x):
        return np.full((len(x), 1, 1, 1), nu)

    return SdeCoefficients("gbm", 1, drift, diffusion, grad_drift, grad_diffusion)


def _linear_drift(params, dim):
    if dim != 1:
        raise ValueError("linear_drift preset is one-dimensional")
    rate = float(params.get("rate", 1.0))
    vol = float(params.get("vol", 0.0))

    def drift(t, x):
        return rate * x

    def diffusion(t, x):
        return np.full((len(x), 1, 1), vol)

    def grad_drift(t, x):
        return np.full((len(x), 1, 1), rate)

    def grad_diffusion(t, x):
        return np.zeros((len(x), 1, 1, 1))

    return SdeCoefficients("linear_drift", 1, drift, diffusion, grad_drift, grad_diffusion)


FORWARD_PRESETS = {
    "brownian": _brownian,
    "gbm": _gbm,
    "linear_drift": _linear_drift,
}


def make_forward(preset, params=None, dim=1):
    if preset not in FORWARD_PRESETS:
        raise ValueError(f"unknown forward preset {preset!r}")
    return FORWARD_PRESETS[preset](params or {}, dim)


@dataclass(frozen=True)
class ForwardBundle:
    """Per-path arrays of the simulated diffusion and its flow.

    dw: (M, N, d) Brownian increments; x: (M, N+1, d);
    grad_x, grad_x_inv: (M, N+1, d, d).  grad_x at node 0 is the identity and
    x at node 0 equals the initial state on every path.
    """

    grid: np.ndarray
    dw: np.ndarray
    x: np.ndarray
    grad_x: np.ndarray
    grad_x_inv: np.ndarray
    seed: int
    n_paths: int


def brownian_increments(grid, n_paths, dim, seed):
    """Counter-based increments: path i uses Philox keyed by (seed, i)."""
    grid = np.asarray(grid, dtype=float)
    n = len(grid) - 1
    scale = np.sqrt(np.diff(grid))[:, None]
    out = np.empty((n_paths, n, dim))
    for i in range(n_paths):
        gen = np.random.Generator(np.random.Philox(key=np.array([seed, i], dtype=np.uint64)))
        out[i] = gen.standard_normal((n, dim)) * scale
    return out


def euler_paths(coeffs, x0, grid, dw):
    """Euler scheme for the state and its first-variation flow, shared noise."""
    grid = np.asarray(grid, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    n_paths, n, dim = dw.shape
    if dim != coeffs.dim or x0.shape != (dim,):
        raise ValueError("dimension mismatch between coefficients, x0 and increments")
    x = np.empty((n_paths, n + 1, dim))
    grad = np.empty((n_paths, n + 1, dim, dim))
    x[:, 0] = x0
    grad[:, 0] = np.eye(dim)
    for i in range(n):
        t, dt = grid[i], grid[i + 1] - grid[i]
        xi = x[:, i]
        gi = grad[:, i]
        sig = coeffs.diffusion(t, xi)
        x[:, i + 1] = xi + coeffs.drift(t, xi) * dt + np.einsum("pjk,pk->pj", sig, dw[:, i])
        gsig = coeffs.grad_diffusion(t, xi)
        grad[:, i + 1] = (
            gi
            + np.einsum("pjl,plm->pjm", coeffs.grad_drift(t, xi), gi) * dt
            + np.einsum("pjkl,plm,pk->pjm", gsig, gi, dw[:, i])
        )
    return x, grad


def _invert_flow(grad):
    dets = np.linalg.det(grad)
    bad = np.argwhere(np.abs(dets) < 1e-14)
    if len(bad):
        path, node = bad[0]
        raise ValueError(f"singular variational flow at path {path}, node {node}")
    return np.linalg.inv(grad)


def simulate_forward(coeffs, x0, grid, n_paths, seed):
    """Simulate the forward bundle; deterministic given (seed, path index)."""
    if n_paths < 1:
        raise ValueError("need at least one path")
    grid = np.asarray(grid, dtype=float)
    dw = brownian_increments(grid, n_paths, coeffs.dim, seed)
    x, grad = euler_paths(coeffs, x0, grid, dw)
    return ForwardBundle(
        grid=grid,
        dw=dw,
        x=x,
        grad_x=grad,
        grad_x_inv=_invert_flow(grad),
        seed=int(seed),
        n_paths=int(n_paths),
    )


def malliavin_forward(bundle, coeffs, u_index, t_index):
    """Brownian-perturbation derivative of X at node t w.r.t. noise at node u.

    Per path: grad_x[t] @ grad_x_inv[u] @ sigma(t_u, X_u); the zero matrix for
    u > t since the perturbation acts only forward in time.
    """
    d = coeffs.dim
    if u_index > t_index:
        return np.zeros((bundle.n_paths, d, d))
    sig = coeffs.diffusion(bundle.grid[u_index], bundle.x[:, u_index])
    return np.einsum(
        "pjl,plk,pkm->pjm",
        bundle.grad_x[:, t_index],
        bundle.grad_x_inv[:, u_index],
        sig,
    )
