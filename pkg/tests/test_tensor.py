"""Unit tests for the reverse-mode tensor core."""

import numpy as np
import pytest

import mutatt.tensor as T
from mutatt.gradcheck import finite_difference_check
from mutatt.tensor import (GraphStateError, MaskError, ShapeError, Tensor,
                           no_grad)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_tensor_coerces_to_float64():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64
    assert t.shape == (3,)
    assert Tensor(2.5).item() == 2.5


def test_add_mul_forward_match_numpy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        assert np.array_equal(T.add(Tensor(a), Tensor(b)).data, a + b)
        assert np.array_equal(T.mul(Tensor(a), Tensor(b)).data, a * b)
        assert np.array_equal(T.sub(Tensor(a), Tensor(b)).data, a - b)
        assert np.array_equal(T.neg(Tensor(a)).data, -a)


def test_operator_sugar_matches_functions():
    rng = np.random.default_rng(1)
    a, b = leaf(rng, 4), leaf(rng, 4)
    assert np.array_equal((a + b).data, a.data + b.data)
    assert np.array_equal((a - b).data, a.data - b.data)
    assert np.array_equal((a * 3.0).data, a.data * 3.0)
    assert np.array_equal((-a).data, -a.data)
    assert np.array_equal((2.0 - a).data, 2.0 - a.data)


def test_add_gradient_accumulates_for_shared_leaf():
    rng = np.random.default_rng(2)
    a = leaf(rng, 3)
    loss = T.add(a, a).sum()
    loss.backward()
    assert np.allclose(a.grad, 2.0)


def test_broadcast_add_unbroadcasts_gradient():
    rng = np.random.default_rng(3)
    a = leaf(rng, 4, 3)
    b = leaf(rng, 3)
    out = T.add(a, b).sum()
    out.backward()
    assert a.grad.shape == (4, 3)
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, 4.0)


def test_matmul_all_rank_combinations():
    rng = np.random.default_rng(4)
    m, k, n = 3, 4, 5
    A, B = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    v, w = rng.normal(size=k), rng.normal(size=k)
    assert np.allclose(T.matmul(Tensor(A), Tensor(B)).data, A @ B)
    assert np.allclose(T.matmul(Tensor(A), Tensor(v)).data, A @ v)
    assert np.allclose(T.matmul(Tensor(v), Tensor(B)).data, v @ B)
    assert np.allclose(T.matmul(Tensor(v), Tensor(w)).data, v @ w)


@pytest.mark.parametrize("shapes", [
    ((3, 4), (4, 5)),
    ((3, 4), (4,)),
    ((4,), (4, 5)),
    ((4,), (4,)),
])
def test_matmul_gradients(shapes):
    rng = np.random.default_rng(5)
    a = leaf(rng, *shapes[0])
    b = leaf(rng, *shapes[1])
    proj = rng.normal(size=np.matmul(a.data, b.data).shape)

    report = finite_difference_check(
        lambda: T.mul(T.matmul(a, b), Tensor(proj)).sum(), {"a": a, "b": b})
    assert report.max_rel_error < 1e-6


def test_matmul_shape_mismatch_raises():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        T.matmul(a, b)


def test_linear_matches_manual_affine():
    rng = np.random.default_rng(6)
    x, w, b = leaf(rng, 5, 3), leaf(rng, 3, 2), leaf(rng, 2)
    out = T.linear(x, w, b)
    assert np.allclose(out.data, x.data @ w.data + b.data)
    report = finite_difference_check(
        lambda: T.mul(T.linear(x, w, b), Tensor(np.ones((5, 2)))).sum(),
        {"x": x, "w": w, "b": b})
    assert report.max_rel_error < 1e-6


def test_relu_and_tanh_values_and_grads():
    # inputs kept away from the relu kink so finite differences are clean
    x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]), requires_grad=True)
    y = T.relu(x)
    assert np.array_equal(y.data, [0.0, 0.0, 0.5, 2.0])
    y.sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 1.0])

    z = Tensor(np.array([-1.0, 0.0, 1.0]), requires_grad=True)
    t = T.tanh(z)
    assert np.allclose(t.data, np.tanh(z.data))
    t.sum().backward()
    assert np.allclose(z.grad, 1.0 - np.tanh(z.data) ** 2)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([1000.0, 1000.5, 999.0])
    out = T.softmax(Tensor(x)).data
    ref = T.softmax(Tensor(x - 1000.0)).data
    assert np.isfinite(out).all()
    assert np.allclose(out, ref)
    assert abs(out.sum() - 1.0) < 1e-12


def test_masked_softmax_zeroes_masked_entries():
    rng = np.random.default_rng(7)
    x = leaf(rng, 5)
    mask = np.array([True, False, True, False, True])
    out = T.softmax(x, mask=mask)
    assert np.all(out.data[~mask] == 0.0)
    assert abs(out.data[mask].sum() - 1.0) < 1e-12

    out.sum().backward()
    assert np.all(x.grad[~mask] == 0.0)


def test_softmax_all_masked_raises():
    with pytest.raises(MaskError):
        T.softmax(Tensor(np.ones(3)), mask=np.zeros(3, dtype=bool))


def test_softmax_gradient():
    rng = np.random.default_rng(8)
    x = leaf(rng, 6)
    proj = rng.normal(size=6)
    mask = np.array([True, True, False, True, True, True])
    report = finite_difference_check(
        lambda: T.mul(T.softmax(x, mask=mask), Tensor(proj)).sum(), {"x": x})
    assert report.max_rel_error < 1e-6


def test_cosine_similarity_known_values():
    a = Tensor(np.array([1.0, 0.0]))
    assert T.cosine_similarity(a, Tensor(np.array([2.0, 0.0]))).item() == pytest.approx(1.0)
    assert T.cosine_similarity(a, Tensor(np.array([-3.0, 0.0]))).item() == pytest.approx(-1.0)
    assert T.cosine_similarity(a, Tensor(np.array([0.0, 5.0]))).item() == pytest.approx(0.0)


def test_cosine_zero_norm_gives_zero_value_and_gradient():
    a = Tensor(np.zeros(4), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    c = T.cosine_similarity(a, b)
    assert c.item() == 0.0
    c.backward()
    assert np.array_equal(a.grad, np.zeros(4))
    assert np.array_equal(b.grad, np.zeros(4))


def test_cosine_rows_matches_per_row_cosine():
    rng = np.random.default_rng(9)
    v = rng.normal(size=5)
    rows = rng.normal(size=(7, 5))
    rows[3] = 0.0
    out = T.cosine_rows(Tensor(v), Tensor(rows)).data
    for i in range(7):
        denom = np.linalg.norm(v) * np.linalg.norm(rows[i])
        want = 0.0 if denom < 1e-6 else float(v @ rows[i] / denom)
        assert out[i] == pytest.approx(want, abs=1e-12)


def test_cosine_rows_gradient():
    rng = np.random.default_rng(10)
    v = leaf(rng, 5)
    rows = leaf(rng, 4, 5)
    proj = rng.normal(size=4)
    report = finite_difference_check(
        lambda: T.mul(T.cosine_rows(v, rows), Tensor(proj)).sum(),
        {"v": v, "rows": rows})
    assert report.max_rel_error < 1e-6


def test_concat_forward_and_gradient_split():
    rng = np.random.default_rng(11)
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    out = T.concat([a, b], axis=1)
    assert out.shape == (2, 5)
    T.mul(out, Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
    assert np.array_equal(a.grad, np.arange(10.0).reshape(2, 5)[:, :3])
    assert np.array_equal(b.grad, np.arange(10.0).reshape(2, 5)[:, 3:])


def test_broadcast_row_and_selectors():
    rng = np.random.default_rng(12)
    x = leaf(rng, 3)
    rows = T.broadcast_row(x, 4)
    assert rows.shape == (4, 3)
    rows.sum().backward()
    assert np.allclose(x.grad, 4.0)

    m = leaf(rng, 3, 2)
    r = T.matrix_row(m, 1)
    assert np.array_equal(r.data, m.data[1])
    r.sum().backward()
    assert np.array_equal(m.grad[1], np.ones(2))
    assert np.array_equal(m.grad[0], np.zeros(2))

    v = leaf(rng, 4)
    item = T.vector_item(v, 2)
    item.backward()
    assert np.array_equal(v.grad, [0.0, 0.0, 1.0, 0.0])


def test_embedding_lookup_pad_row_stays_dead():
    rng = np.random.default_rng(13)
    table = leaf(rng, 6, 3)
    table.data[0] = 0.0
    ids = np.array([2, 0, 2, 5])
    out = T.embedding_lookup(table, ids)
    assert np.array_equal(out.data[1], np.zeros(3))
    assert np.array_equal(out.data[0], table.data[2])
    out.sum().backward()
    # repeated id accumulates; padding row receives nothing
    assert np.allclose(table.grad[2], 2.0)
    assert np.array_equal(table.grad[0], np.zeros(3))
    assert np.allclose(table.grad[5], 1.0)


def test_sum_axis_and_reshape_gradients():
    rng = np.random.default_rng(14)
    x = leaf(rng, 3, 4)
    x.sum(axis=0).sum().backward()
    assert np.allclose(x.grad, 1.0)

    y = leaf(rng, 2, 6)
    y.reshape(3, 4).sum().backward()
    assert np.allclose(y.grad, 1.0)


def test_no_grad_suppresses_graph():
    rng = np.random.default_rng(15)
    a = leaf(rng, 3)
    with no_grad():
        out = T.mul(a, a).sum()
    assert not out.requires_grad
    out.backward()
    assert np.array_equal(a.grad, np.zeros(3))


def test_backward_requires_scalar_and_rejects_reuse():
    rng = np.random.default_rng(16)
    a = leaf(rng, 3)
    with pytest.raises(ShapeError):
        T.mul(a, a).backward()

    loss = T.mul(a, a).sum()
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()


def test_untouched_leaf_reports_zero_gradient():
    rng = np.random.default_rng(17)
    a, b = leaf(rng, 3), leaf(rng, 3)
    T.mul(a, a).sum().backward()
    assert np.array_equal(b.grad, np.zeros(3))


def test_backward_through_dead_cosine_route():
    # a node whose only consumer is a zero-norm cosine must still propagate
    # a zero gradient instead of crashing the replay
    rng = np.random.default_rng(18)
    w = leaf(rng, 3, 3)
    x = Tensor(rng.normal(size=3))
    dead = T.cosine_similarity(Tensor(np.zeros(3)), T.matmul(w, x))
    live = T.matmul(Tensor(np.ones(3)), T.matmul(w, x))
    loss = T.add(dead, live)
    loss.backward()
    assert np.isfinite(w.grad).all()
    assert np.abs(w.grad).sum() > 0


def test_gradients_accumulate_across_multiple_uses():
    rng = np.random.default_rng(19)
    x = leaf(rng, 4)
    y = T.add(T.mul(x, x).sum(), T.mul(x, Tensor(np.ones(4))).sum())
    y.backward()
    assert np.allclose(x.grad, 2.0 * x.data + 1.0)
