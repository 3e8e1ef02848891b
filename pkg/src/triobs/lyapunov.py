"""Batched evaluation of the Lyapunov-derivative quadratic forms.

For a level-k matrix P(t), its derivative Pd(t), the structured matrix A_k and
an error vector e, the decrease condition involves

    N = e'P A e + 1/2 e'Pd e + d e'P e.

All functions here work on leading batch axes: P has shape (..., k, k), e has
shape (..., k) and so on.
"""

from __future__ import annotations

import numpy as np

from .divdiff import assemble_A, q_index, q_size


def quad(M, e):
    return np.einsum("...i,...ij,...j->...", e, M, e)


def worst_q(n: int, k: int, P, e, sigma):
    """Packed q of norm sigma maximizing e'P A e over the lower-triangle entries of level k.

    The q-dependent part of e'PAe is sum_{b<=a} q_{off+a, off+b} (Pe)_a e_b, which
    is linear in q, so its maximum over |q| <= sigma is sigma times the gradient norm.
    """
    Pe = np.einsum("...ij,...j->...i", P, e)
    batch = Pe.shape[:-1]
    q = np.zeros(batch + (q_size(n),))
    off = n - k
    grads = []
    idx = []
    for a in range(1, k + 1):
        for b in range(1, a + 1):
            grads.append(Pe[..., a - 1] * e[..., b - 1])
            idx.append(q_index(off + a, off + b))
    G = np.stack(grads, axis=-1)
    norm = np.linalg.norm(G, axis=-1, keepdims=True)
    sig = np.broadcast_to(np.asarray(sigma, float), batch)[..., None]
    q[..., idx] = np.where(norm > 0, sig * G / np.where(norm > 0, norm, 1.0), 0.0)
    return q


def random_q(rng, n: int, k: int, sigma, batch):
    """Packed q uniform in the ball |q| <= sigma, supported on the level-k lower block."""
    off = n - k
    idx = [q_index(off + a, off + b) for a in range(1, k + 1) for b in range(1, a + 1)]
    dim = len(idx)
    u = rng.normal(size=tuple(batch) + (dim,))
    u /= np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-300)
    rad = np.broadcast_to(np.asarray(sigma, float), batch) * rng.random(batch) ** (1.0 / dim)
    q = np.zeros(tuple(batch) + (q_size(n),))
    q[..., idx] = u * rad[..., None]
    return q


def sample_states(rng, n: int, b, batch):
    """Full states with x_1 = 0 and |(x_2..x_n)| <= b, and outputs |y| <= b."""
    b = np.broadcast_to(np.asarray(b, float), batch)
    u = rng.normal(size=tuple(batch) + (n - 1,))
    u /= np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-300)
    rad = b * rng.random(batch) ** (1.0 / (n - 1))
    x = np.zeros(tuple(batch) + (n,))
    x[..., 1:] = u * rad[..., None]
    y = b * rng.uniform(-1.0, 1.0, batch)
    return x, y


def sample_directions(rng, dim: int, batch):
    u = rng.normal(size=tuple(batch) + (dim,))
    return u / np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-300)


def log_magnitudes(rng, lo, hi, batch):
    lo = np.broadcast_to(np.asarray(lo, float), batch)
    hi = np.broadcast_to(np.asarray(hi, float), batch)
    w = rng.random(batch)
    return lo * np.exp(w * np.log(hi / lo))


def lyap_terms(sys, k, t, P, Pd, q, x, e, y):
    """Return (e'PAe, e'Pd e, e'Pe, scale) where scale bounds the rounding level of the terms."""
    A = assemble_A(sys, k, t, q, x, e, y)
    PA = P @ A
    ePAe = quad(PA, e)
    ePde = quad(Pd, e)
    ePe = quad(P, e)
    ae = np.abs(e)
    scale = quad(np.abs(P) @ np.abs(A), ae) + quad(np.abs(Pd), ae) + quad(np.abs(P), ae)
    return ePAe, ePde, ePe, scale
