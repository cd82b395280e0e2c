import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hamba.autodiff import (NonFiniteError, ParamStore, ShapeError, Tape, TapeError, Tensor, backward,
                            check_function, finite_diff_check, no_record, ops)
from hamba.autodiff.gradcheck import relative_error


def test_concat_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))
    assert ops.concat([a, b], axis=0).shape == (4, 3)


def test_softmax_of_equal_row_is_uniform():
    out = ops.softmax(Tensor(np.full((1, 4), 3.7)), axis=-1)
    np.testing.assert_allclose(out.data, 0.25, rtol=0, atol=1e-15)


def test_mean_pool_over_grid():
    grid = Tensor(np.random.default_rng(0).normal(size=(16, 12, 512)))
    pooled = ops.mean_pool(grid)
    assert pooled.shape == (512,)
    np.testing.assert_allclose(pooled.data, grid.data.mean(axis=(0, 1)), atol=1e-14)


def test_matmul_examples():
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    out = ops.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.ones((2, 1))))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_matches_central_differences():
    rng = np.random.default_rng(2)
    report = check_function(ops.matmul, rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), h=1e-5)
    assert report.worst < 1e-5


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def _grad_of(fn, w0):
    store = ParamStore()
    w = store.add("w", np.array(w0, dtype=float))
    with Tape() as tape:
        loss = fn(w)
    backward(loss, tape, store)
    return w.grad


def test_backward_examples():
    np.testing.assert_array_equal(_grad_of(ops.sum, [0.3, -1.0, 2.0]), [1, 1, 1])
    np.testing.assert_array_equal(_grad_of(lambda w: ops.sum(ops.mul(w, 0.0)), [1.0, 2.0, 3.0]), [0, 0, 0])
    np.testing.assert_array_equal(_grad_of(lambda w: ops.sum(ops.mul(w, w)), [1.0, 2.0, 3.0]), [2, 4, 6])


def test_tape_is_single_use():
    store = ParamStore()
    w = store.add("w", np.ones(2))
    with Tape() as tape:
        loss = ops.sum(w)
    backward(loss, tape, store)
    with pytest.raises(TapeError):
        backward(loss, tape, store)
    with pytest.raises(TapeError):
        with tape:
            pass


def test_backward_requires_scalar_and_matching_tape():
    store = ParamStore()
    w = store.add("w", np.ones(3))
    with Tape() as tape:
        y = ops.mul(w, 2.0)
    with pytest.raises(TapeError):
        backward(y, tape)
    with Tape() as t1:
        loss = ops.sum(w)
    with Tape() as t2:
        ops.sum(w)
    with pytest.raises(TapeError):
        backward(loss, t2)
    backward(loss, t1)


def test_no_record_suspends_taping():
    store = ParamStore()
    w = store.add("w", np.ones(3))
    with Tape() as tape:
        with no_record():
            ops.sum(ops.mul(w, w))
        assert len(tape) == 0
        ops.sum(w)
    assert len(tape) == 1


def test_gradients_accumulate_until_zeroed():
    store = ParamStore()
    w = store.add("w", np.array([1.0, 2.0]))
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum(ops.mul(w, 3.0))
        backward(loss, tape, store)
    np.testing.assert_array_equal(w.grad, [6.0, 6.0])
    store.zero_grad()
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        ops.log(Tensor(np.array([0.0, 1.0])))


def test_param_store_is_lexicographic_and_rejects_duplicates():
    store = ParamStore()
    for name in ("b.w", "a.z", "a.b"):
        store.add(name, np.zeros(1))
    assert [n for n, _ in store.items()] == ["a.b", "a.z", "b.w"]
    with pytest.raises(KeyError):
        store.add("a.z", np.zeros(1))


def test_state_arrays_round_trip():
    store = ParamStore()
    store.add("w", np.arange(3.0))
    store.add_buffer("stat", np.ones(2))
    state = {k: v.copy() * 2 for k, v in store.state_arrays().items()}
    store.load_state_arrays(state)
    np.testing.assert_array_equal(store["w"].data, [0.0, 2.0, 4.0])
    np.testing.assert_array_equal(store.buffer("stat"), [2.0, 2.0])


def test_finite_diff_check_on_quadratic_form():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(4, 4))
    q = Tensor(m @ m.T)
    store = ParamStore()
    x = store.add("x", rng.normal(size=(4, 1)))

    def f():
        return ops.sum(ops.mul(x, ops.matmul(q, x)))

    report = finite_diff_check(f, store, h=1e-5)
    assert report.worst < 1e-6


def test_finite_diff_check_flags_a_wrong_gradient():
    store = ParamStore()
    x = store.add("x", np.array([0.5, -0.3]))

    def bad_square(a):
        # forward is a^2 but the recorded derivative is 3a instead of 2a
        from hamba.autodiff.tensor import make_result
        return make_result(a.data ** 2, (a,), lambda g: (3 * a.data * g,), "bad_square")

    report = finite_diff_check(lambda: ops.sum(bad_square(x)), store, h=1e-6)
    assert report.worst > 0.1


def test_relative_error_noise_floor():
    assert relative_error(np.array([1e-14]), np.array([0.0]), floor=1e-10) < 1e-3
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 4)), st.booleans())
def test_broadcast_add_gradient_sums_over_broadcast_axes(shape, row_vector):
    rng = np.random.default_rng(sum(shape))
    store = ParamStore()
    a = store.add("a", rng.normal(size=shape))
    b_shape = (1, shape[1]) if row_vector else shape
    b = store.add("b", rng.normal(size=b_shape))
    weights = rng.normal(size=shape)
    with Tape() as tape:
        loss = ops.sum(ops.mul(ops.add(a, ops.broadcast_to(b, shape)), Tensor(weights)))
    backward(loss, tape, store)
    np.testing.assert_allclose(a.grad, weights)
    np.testing.assert_allclose(b.grad, weights.sum(axis=0, keepdims=True) if row_vector else weights)


def test_masked_softmax_gives_zero_outside_mask():
    mask = np.array([[True, False, True], [False, True, False]])
    out = ops.masked_softmax(Tensor(np.random.default_rng(4).normal(size=(2, 3))), mask)
    assert np.all(out.data[~mask] == 0.0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-15)


def test_split_then_concat_is_lossless():
    x = Tensor(np.random.default_rng(5).normal(size=(2, 22, 4)))
    parts = ops.split(x, [21, 1], axis=1)
    np.testing.assert_array_equal(ops.concat(parts, axis=1).data, x.data)
