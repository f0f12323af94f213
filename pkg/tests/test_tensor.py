"""Primitive op semantics and gradient checks against finite differences."""

import numpy as np
import pytest

import linattn.numcore as T
from linattn.errors import ContractError, DegenerateRowError, NonFiniteError, ShapeError
from oracles import assert_grad_close, finite_difference_grad, naive_masked_softmax, naive_matmul

RNG = np.random.default_rng(0)


def _fd_check(build, x0, label, h=1e-3, rtol=1e-3):
    """build(Tensor) -> scalar Tensor; checks analytic grad of x0 against FD."""
    xt = T.tensor(x0.astype(np.float32), requires_grad=True)
    build(xt).backward()

    def f(arr):
        return float(build(T.tensor(arr, dtype=np.float64)).item())

    numeric = finite_difference_grad(f, x0, h=h)
    assert_grad_close(xt.grad, numeric, rtol=rtol, label=label)


class TestMatmul:
    def test_identity(self):
        b = RNG.normal(size=(3, 5)).astype(np.float32)
        out = T.matmul(T.tensor(np.eye(3, dtype=np.float32)), T.tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_scalar_case(self):
        out = T.matmul(T.tensor([[2.0]]), T.tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_against_triple_loop(self):
        a = RNG.normal(size=(5, 4)).astype(np.float32)
        b = RNG.normal(size=(4, 3)).astype(np.float32)
        out = T.matmul(T.tensor(a), T.tensor(b))
        assert np.abs(out.data - naive_matmul(a, b)).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))

    def test_batched_against_loop(self):
        a = RNG.normal(size=(2, 5, 4)).astype(np.float32)
        b = RNG.normal(size=(4, 3)).astype(np.float32)
        out = T.matmul(T.tensor(a), T.tensor(b))
        for i in range(2):
            assert np.abs(out.data[i] - naive_matmul(a[i], b)).max() < 1e-6


class TestMaskedSoftmax:
    def test_uniform_rows(self):
        out = T.masked_softmax_rows(T.tensor(np.zeros((4, 4), dtype=np.float32)))
        np.testing.assert_allclose(out.data, 0.25)

    def test_single_masked_entry(self):
        mask = np.array([[0.0, -np.inf, 0.0]])
        out = T.masked_softmax_rows(T.tensor(np.zeros((1, 3), dtype=np.float32)), mask)
        np.testing.assert_allclose(out.data, [[0.5, 0.0, 0.5]])

    def test_against_oracle_causal(self):
        scores = RNG.normal(size=(6, 6)).astype(np.float32)
        mask = np.where(np.tril(np.ones((6, 6))) > 0, 0.0, -np.inf)
        out = T.masked_softmax_rows(T.tensor(scores), mask)
        assert np.abs(out.data - naive_masked_softmax(scores, mask)).max() < 1e-6

    def test_rows_sum_to_one(self):
        scores = RNG.normal(size=(8, 8)).astype(np.float32) * 10
        mask = np.where(np.tril(np.ones((8, 8))) > 0, 0.0, -np.inf)
        out = T.masked_softmax_rows(T.tensor(scores), mask)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        # masked positions exactly zero
        assert (out.data[mask < 0] == 0.0).all()

    def test_fully_masked_row(self):
        mask = np.full((2, 2), -np.inf)
        mask[0] = 0.0
        with pytest.raises(DegenerateRowError):
            T.masked_softmax_rows(T.tensor(np.zeros((2, 2), dtype=np.float32)), mask)


class TestBackwardBasics:
    def test_square(self):
        x = T.tensor([[3.0]], requires_grad=True)
        T.reduce_sum(T.mul(x, x)).backward()
        assert x.grad[0, 0] == pytest.approx(6.0)

    def test_sigmoid_at_zero(self):
        x = T.tensor(np.zeros((2, 3), dtype=np.float32), requires_grad=True)
        T.reduce_sum(T.sigmoid(x)).backward()
        np.testing.assert_allclose(x.grad, 0.25, atol=1e-7)

    def test_non_scalar_loss_rejected(self):
        x = T.tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            T.mul(x, x).backward()

    def test_repeated_backward_accumulates(self):
        x = T.tensor([[2.0]], requires_grad=True)
        loss = T.reduce_sum(T.mul(x, x))
        loss.backward()
        loss.backward()
        assert x.grad[0, 0] == pytest.approx(8.0)

    def test_grad_only_on_leaves(self):
        x = T.tensor(np.ones((2, 2)), requires_grad=True)
        y = T.mul(x, x)
        T.reduce_sum(y).backward()
        assert y.grad is None and x.grad is not None


class TestFiniteGuard:
    def test_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            T.exp(T.tensor(np.full((2, 2), 1e4, dtype=np.float32)))

    def test_divide_by_zero_raises(self):
        with pytest.raises(NonFiniteError):
            T.div(T.tensor([[1.0]]), T.tensor([[0.0]]))

    def test_suspension_context(self):
        with T.no_finite_check():
            out = T.log(T.tensor([[0.0]]))
        assert np.isneginf(out.data[0, 0])


class TestDeterminism:
    def test_bitwise_repeatability(self):
        a = RNG.normal(size=(16, 16)).astype(np.float32)
        b = RNG.normal(size=(16, 16)).astype(np.float32)
        r1 = T.masked_softmax_rows(T.matmul(T.tensor(a), T.tensor(b))).data
        r2 = T.masked_softmax_rows(T.matmul(T.tensor(a), T.tensor(b))).data
        assert (r1 == r2).all()


class TestGradientsAgainstFD:
    """Every primitive's analytic gradient vs central finite differences."""

    def test_matmul(self):
        b = RNG.normal(size=(4, 3))
        _fd_check(lambda x: T.mean_all(T.matmul(x, T.tensor(b, dtype=x.dtype))),
                  RNG.normal(size=(5, 4)), "matmul-lhs")
        a = RNG.normal(size=(5, 4))
        _fd_check(lambda x: T.mean_all(T.matmul(T.tensor(a, dtype=x.dtype), x)),
                  RNG.normal(size=(4, 3)), "matmul-rhs")

    def test_matmul_broadcast_weight(self):
        w0 = RNG.normal(size=(4, 3))
        _fd_check(lambda w: T.mean_all(T.matmul(T.tensor(RNG2, dtype=w.dtype), w)),
                  w0, "matmul-shared-weight")

    def test_elementwise_unaries(self):
        x0 = RNG.normal(size=(3, 4))
        _fd_check(lambda x: T.mean_all(T.exp(x)), x0, "exp")
        _fd_check(lambda x: T.mean_all(T.sigmoid(x)), x0, "sigmoid")
        _fd_check(lambda x: T.mean_all(T.softplus(x)), x0, "softplus")
        xp = np.abs(x0) + 0.5
        _fd_check(lambda x: T.mean_all(T.log(x)), xp, "log")
        _fd_check(lambda x: T.mean_all(T.sqrt(x)), xp, "sqrt")

    def test_binary_broadcast(self):
        x0 = RNG.normal(size=(3, 4))
        col = RNG.normal(size=(3, 1))
        row = RNG.normal(size=(4,))
        _fd_check(lambda x: T.mean_all(T.mul(x, T.tensor(col, dtype=x.dtype))), x0, "mul-col")
        _fd_check(lambda x: T.mean_all(T.mul(T.tensor(x0, dtype=x.dtype), x)),
                  row, "mul-row-broadcast")
        _fd_check(lambda x: T.mean_all(T.div(T.tensor(x0, dtype=x.dtype),
                                             T.add(T.mul(x, x), 1.0))), x0, "div-denominator")
        _fd_check(lambda x: T.mean_all(T.sub(x, T.tensor(row, dtype=x.dtype))), x0, "sub")

    def test_structural(self):
        x0 = RNG.normal(size=(3, 4))
        _fd_check(lambda x: T.mean_all(T.transpose(x)), x0, "transpose")
        _fd_check(lambda x: T.mean_all(T.mul(T.reshape(x, (4, 3)),
                                             T.tensor(W43, dtype=x.dtype))), x0, "reshape")
        _fd_check(lambda x: T.mean_all(T.mul(T.moveaxis(x, 0, 1),
                                             T.tensor(W43, dtype=x.dtype))), x0, "moveaxis")
        _fd_check(lambda x: T.mean_all(T.slice_axis(x, -2, 1, 3)), x0, "slice")
        _fd_check(
            lambda x: T.mean_all(T.mul(T.concat_last(x, T.mul(x, x)),
                                       T.tensor(W38, dtype=x.dtype))),
            x0, "concat-last")
        _fd_check(lambda x: T.mean_all(T.mul(T.cumsum_time(x),
                                             T.tensor(W34, dtype=x.dtype))), x0, "cumsum-time")

    def test_reductions(self):
        x0 = RNG.normal(size=(3, 4))
        _fd_check(lambda x: T.reduce_sum(T.mul(x, x)), x0, "reduce-sum")
        _fd_check(lambda x: T.mean_all(T.mul(T.mean_last(x), T.mean_last(x))), x0, "mean-last")
        _fd_check(lambda x: T.mean_all(T.logsumexp_last(x)), x0, "logsumexp")

    def test_masked_softmax(self):
        mask = np.where(np.tril(np.ones((4, 4))) > 0, 0.0, -np.inf)
        w = RNG.normal(size=(4, 4))
        _fd_check(
            lambda x: T.mean_all(T.mul(T.masked_softmax_rows(x, mask),
                                       T.tensor(w, dtype=x.dtype))),
            RNG.normal(size=(4, 4)), "masked-softmax")

    def test_clip(self):
        x0 = RNG.normal(size=(3, 4))  # keep entries away from the clip knees
        x0 = np.where(np.abs(x0) < 0.1, 0.3, x0)
        _fd_check(lambda x: T.mean_all(T.clip(x, -2.5, 2.5)), x0, "clip")

    def test_window_kernels(self):
        idx = np.array([[0, 0], [0, 1], [1, 2]])
        q0 = RNG.normal(size=(3, 2))
        v = RNG.normal(size=(3, 2))

        def build(x):
            kg = T.take_time(x, idx)
            s = T.window_scores(T.tensor(q0, dtype=x.dtype), kg)
            y = T.window_mix(s, T.take_time(T.tensor(v, dtype=x.dtype), idx))
            return T.mean_all(T.mul(y, y))

        _fd_check(build, RNG.normal(size=(3, 2)), "take/scores/mix-keys")

        k0 = RNG.normal(size=(3, 2))

        def build_q(x):
            kg = T.take_time(T.tensor(k0, dtype=x.dtype), idx)
            s = T.window_scores(x, kg)
            y = T.window_mix(s, T.take_time(T.tensor(v, dtype=x.dtype), idx))
            return T.mean_all(T.mul(y, y))

        _fd_check(build_q, q0, "window-scores-queries")

    def test_embedding(self):
        ids = np.array([0, 2, 1, 2])
        _fd_check(lambda tab: T.mean_all(T.mul(T.embedding(tab, ids),
                                               T.tensor(W42, dtype=tab.dtype))),
                  RNG.normal(size=(3, 2)), "embedding")

    def test_cross_entropy(self):
        targets = np.array([1, 0, 3])
        _fd_check(lambda x: T.cross_entropy_mean(x, targets),
                  RNG.normal(size=(3, 4)), "cross-entropy")

    def test_cross_entropy_target_range(self):
        with pytest.raises(ContractError):
            T.cross_entropy_mean(T.tensor(np.zeros((2, 3))), np.array([0, 3]))


RNG2 = np.random.default_rng(1).normal(size=(2, 5, 4))
W43 = np.random.default_rng(2).normal(size=(4, 3))
W34 = np.random.default_rng(3).normal(size=(3, 4))
W38 = np.random.default_rng(4).normal(size=(3, 8))
W42 = np.random.default_rng(5).normal(size=(4, 2))
