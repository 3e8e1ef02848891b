import numpy as np
import pytest

from triobs.divdiff import assemble_A, check_pair, decompose, delta, q_from_states, q_index, q_size
from triobs.model import eval_rhs


def ex_delta12(y, x2, e):
    # quotient of f1 in x2, expanded by hand
    return y ** 2 + 1.5 * y * (2 * x2 - e) + x2 ** 2 + x2 * (x2 - e) + (x2 - e) ** 2


def ex_delta22(y, x2, e):
    return -y * (2 * x2 - e) + 1.0 - (x2 ** 2 + x2 * (x2 - e) + (x2 - e) ** 2)


def test_known_values(example):
    sys, _ = example
    # f1(1, 1) - f1(1, 0) = 3.5 and f2(1, 1) - f2(1, 0) = -2 - (-1)
    assert float(delta(sys, 1, 2, 0.0, 1.0, [1.0], [1.0])) == pytest.approx(3.5, rel=1e-15)
    assert float(delta(sys, 2, 2, 0.0, 1.0, [1.0], [1.0])) == pytest.approx(-1.0, rel=1e-15)
    assert float(delta(sys, 1, 2, 0.0, 0.0, [1.0], [1.0])) == pytest.approx(1.0, rel=1e-15)


def test_closed_forms(example, rng):
    sys, _ = example
    y, x2 = rng.uniform(-3, 3, (2, 1000))
    e = rng.uniform(-5, 5, 1000)
    np.testing.assert_allclose(delta(sys, 1, 2, 0.0, y, x2[None], e[None]), ex_delta12(y, x2, e), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(delta(sys, 2, 2, 0.0, y, x2[None], e[None]), ex_delta22(y, x2, e), rtol=1e-9, atol=1e-9)


def test_zero_error_gives_zero(example):
    sys, _ = example
    v = delta(sys, 1, 2, 0.0, np.array([1.0, 2.0]), np.array([[0.5, -1.0]]), np.array([[0.0, 0.0]]))
    np.testing.assert_array_equal(v, [0.0, 0.0])


def test_invalid_pairs():
    for i, j in [(1, 1), (0, 2), (1, 3), (3, 4), (2, 1)]:
        with pytest.raises(ValueError):
            check_pair(3, i, j)
    check_pair(3, 1, 2)
    check_pair(3, 3, 3)


def test_decompose_telescopes(chain3, rng):
    sys, _ = chain3
    N = 500
    t = rng.uniform(0, 10, N)
    y = rng.uniform(-2, 2, N)
    x = rng.uniform(-2, 2, (2, N))
    z = rng.uniform(-2, 2, (2, N))
    for i in (1, 2, 3):
        m = sys.tail_len(i)
        dec = decompose(sys, i, t, y, x[:m], z[:m])
        lhs = sys.eval_f(i, t, np.vstack([y, x[:m]])) - sys.eval_f(i, t, np.vstack([y, z[:m]]))
        np.testing.assert_allclose(dec.combine(x[:m] - z[:m]), lhs, rtol=1e-9, atol=1e-12)


def test_q_packing():
    seen = sorted(q_index(i, j) for i in range(1, 5) for j in range(1, i + 1))
    assert seen == list(range(q_size(4)))


def test_A_times_e_is_the_field_difference(chain3, rng):
    sys, _ = chain3
    N = 300
    t = rng.uniform(0, 10, N)
    x = rng.uniform(-2, 2, (3, N))
    z = rng.uniform(-2, 2, (3, N))
    y = x[0]
    q = q_from_states(sys, t, x, z, y)
    A = assemble_A(sys, 3, t, q.T, x.T, (x - z).T, y)
    got = np.einsum("nij,nj->ni", A, (x - z).T)
    xy, zy = x.copy(), z.copy()
    xy[0] = zy[0] = y
    want = np.stack([sys.eval_f(i, t, xy[: sys.arity(i)]) - sys.eval_f(i, t, zy[: sys.arity(i)])
                     for i in (1, 2, 3)], axis=1)
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)


def test_A_structure(chain3):
    sys, _ = chain3
    q = np.arange(1.0, q_size(3) + 1)
    A = assemble_A(sys, 2, 0.0, q, np.zeros(3), np.array([0.5, 0.25]), 0.0)
    assert A[0, 0] == q[q_index(2, 2)]
    assert A[1, 0] == q[q_index(3, 2)] and A[1, 1] == q[q_index(3, 3)]
    assert A[0, 1] > 0
    with pytest.raises(ValueError):
        assemble_A(sys, 4, 0.0, q, np.zeros(3), np.zeros(4), 0.0)
