"""Divided differences of the triangular vector field and the matrices built from them.

Indices are 1-based to match the row/slot labels: `delta(sys, i, j, ...)` is
the quotient of f_i in its state slot j (2 <= j <= min(i+1, n)). Tail states
``xs`` list x_2, x_3, ... and errors ``es`` list e_2, ..., e_j; both may carry
trailing batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TriangularSystem


def check_pair(n: int, i: int, j: int) -> None:
    if not (1 <= i <= n and 2 <= j <= min(i + 1, n)):
        raise ValueError(f"invalid divided-difference index pair (i={i}, j={j}) for n={n}")


def delta(sys: TriangularSystem, i: int, j: int, t, y, xs, es):
    """Difference quotient of f_i in slot j, with slots 2..j-1 already shifted.

    Equals [f_i(t, y, x_2-e_2, .., x_{j-1}-e_{j-1}, x_j, ..) - f_i(t, y, .., x_j-e_j, ..)] / e_j,
    and exactly 0 wherever e_j = 0.
    """
    check_pair(sys.n, i, j)
    xs = np.asarray(xs, float)
    es = np.asarray(es, float)
    m = sys.tail_len(i)
    if xs.shape[0] != m:
        raise ValueError(f"f{i} needs {m} tail states, got {xs.shape[0]}")
    if es.shape[0] < j - 1:
        raise ValueError(f"delta({i},{j}) needs errors e_2..e_{j}")
    y = np.asarray(y, float)
    batch = np.broadcast_shapes(xs.shape[1:], es.shape[1:], y.shape, np.shape(t))
    hi = np.empty((m + 1,) + batch)
    hi[0] = y
    hi[1:] = xs
    hi[1:j - 1] -= es[: j - 2]
    ej = np.broadcast_to(es[j - 2], batch)
    lo = hi.copy()
    lo[j - 1] = hi[j - 1] - ej
    num = sys.eval_f(i, t, hi) - sys.eval_f(i, t, lo)
    zero = ej == 0
    return np.where(zero, 0.0, num / np.where(zero, 1.0, ej))


@dataclass
class DifferenceDecomposition:
    """Coefficients delta_{i,j}, j = 2..min(i+1, n), of one row of the telescoping sum."""

    i: int
    coeffs: np.ndarray

    def combine(self, errors) -> np.ndarray:
        """Sum_j coeffs[j] * e_j for errors e_2, e_3, ..."""
        errors = np.asarray(errors, float)
        return np.sum(self.coeffs * errors[: self.coeffs.shape[0]], axis=0)


def decompose(sys: TriangularSystem, i: int, t, y, x_tail, z_tail) -> DifferenceDecomposition:
    """Split f_i(t,y,x_tail) - f_i(t,y,z_tail) into slot-wise divided differences."""
    x_tail = np.asarray(x_tail, float)
    z_tail = np.asarray(z_tail, float)
    if x_tail.shape != z_tail.shape:
        raise ValueError("tails must have matching shapes")
    e = x_tail - z_tail
    m = sys.tail_len(i)
    coeffs = np.stack([delta(sys, i, j, t, y, x_tail, e) for j in range(2, m + 2)])
    return DifferenceDecomposition(i, coeffs)


def q_size(n: int) -> int:
    return n * (n + 1) // 2


def q_index(i: int, j: int) -> int:
    """Flat position of q_{i,j} (1-based, j <= i) in the packed lower triangle."""
    return i * (i - 1) // 2 + (j - 1)


def q_from_states(sys: TriangularSystem, t, x, z, y) -> np.ndarray:
    """Packed lower-triangle q with q_{i,1} = 0 and q_{i,j} = delta_{i,j}(x, x - z) for 2 <= j <= i."""
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    n = sys.n
    q = np.zeros((q_size(n),) + x.shape[1:])
    e = x - z
    for i in range(2, n + 1):
        m = sys.tail_len(i)
        for j in range(2, i + 1):
            q[q_index(i, j)] = delta(sys, i, j, t, y, x[1:m + 1], e[1:])
    return q


def assemble_A(sys: TriangularSystem, k: int, t, q, x, e, y) -> np.ndarray:
    """Structured k x k matrix for level k with batch axes leading.

    Shapes: q (..., l), x (..., n) full state (x_1 unused), e (..., k) level
    errors, y (...). Entry (a, b) with b <= a holds q_{n-k+a, n-k+b}; the
    superdiagonal holds delta_{n-k+a, n-k+a+1} evaluated with the error vector
    zero-padded in front to full length; entries above it are 0.
    """
    n = sys.n
    if not 2 <= k <= n:
        raise ValueError(f"level k={k} outside 2..{n}")
    q = np.asarray(q, float)
    x = np.asarray(x, float)
    e = np.asarray(e, float)
    if q.shape[-1] != q_size(n) or x.shape[-1] != n or e.shape[-1] != k:
        raise ValueError("assemble_A: dimension mismatch between q, x, e and the system")
    batch = np.broadcast_shapes(q.shape[:-1], x.shape[:-1], e.shape[:-1], np.shape(y))
    A = np.zeros(batch + (k, k))
    off = n - k
    for a in range(1, k + 1):
        for b in range(1, a + 1):
            A[..., a - 1, b - 1] = q[..., q_index(off + a, off + b)]
    full_e = np.zeros(batch + (n,))
    full_e[..., off:] = e
    xt = np.moveaxis(np.broadcast_to(x, batch + (n,)), -1, 0)
    et = np.moveaxis(full_e, -1, 0)
    for a in range(1, k):
        i = off + a
        m = sys.tail_len(i)
        A[..., a - 1, a] = delta(sys, i, i + 1, t, y, xt[1:m + 1], et[1:])
    return A
