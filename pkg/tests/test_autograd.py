import math

import numpy as np
import pytest

from domainkd import autograd as ag
from domainkd.autograd import (
    DimensionError,
    NumericError,
    Tensor,
    ValidationError,
    cross_entropy,
    gradcheck,
    layernorm,
    matmul,
    mse,
    mul,
    softmax_lastdim,
)


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(matmul(a, b).data, b.data)


def test_matmul_hand_dot_product():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.item() == 11.0


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(3, 4, 5))
    out = matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        assert np.allclose(out[i], a[i] @ b[i])


def test_softmax_symmetry():
    assert np.allclose(softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_stabilized_at_large_inputs():
    out = softmax_lastdim(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [0.5, 0.5])


def test_softmax_hand_value():
    out = softmax_lastdim(Tensor([0.0, math.log(3.0)])).data
    assert np.allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 3, 7)) * 10)
    y = softmax_lastdim(x).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(y >= 0)


def test_softmax_empty_last_axis_rejected():
    with pytest.raises(DimensionError):
        softmax_lastdim(Tensor(np.zeros((2, 0))))


def test_layernorm_constant_row_is_zero():
    out = layernorm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layernorm_hand_two_values():
    out = layernorm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layernorm_zero_gain_broadcasts_bias():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 5)))
    bias = Tensor(np.arange(5.0))
    out = layernorm(x, Tensor(np.zeros(5)), bias)
    assert np.allclose(out.data, np.broadcast_to(bias.data, (2, 5)))


def test_layernorm_rows_centered_before_affine():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(6, 9)) * 4 + 2)
    out = layernorm(x, Tensor(np.ones(9)), Tensor(np.zeros(9)))
    assert np.all(np.abs(out.data.mean(axis=-1)) < 1e-10)


def test_layernorm_gain_shape_mismatch():
    with pytest.raises(DimensionError):
        layernorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_mse_identity_is_zero():
    a = Tensor([1.0, 2.0, 3.0])
    assert mse(a, Tensor([1.0, 2.0, 3.0])).item() == 0.0


def test_mse_hand_value():
    assert mse(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).item() == 5.0


def test_mse_all_invalid_mask_is_zero():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    out = mse(a, Tensor(np.zeros((2, 3))), valid_mask=np.zeros(2))
    assert out.item() == 0.0


def test_mse_mask_restricts_mean():
    a = Tensor(np.array([[0.0, 0.0], [9.0, 9.0]]))
    b = Tensor(np.array([[1.0, 3.0], [0.0, 0.0]]))
    out = mse(a, b, valid_mask=np.array([1.0, 0.0]))
    assert out.item() == 5.0


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_cross_entropy_uniform_prediction():
    logits = Tensor(np.zeros((4, 2)))
    out = cross_entropy(logits, np.array([0, 1, 1, 0]))
    assert abs(out.item() - math.log(2.0)) < 1e-12


def test_cross_entropy_confident_correct():
    out = cross_entropy(Tensor([[10.0, -10.0]]), np.array([0]))
    # log-sum-exp by hand: log(1 + e^-20)
    assert abs(out.item() - math.log1p(math.exp(-20.0))) < 1e-15
    assert abs(out.item() - 2.06e-9) < 1e-11


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValidationError):
        cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))


def test_gradcheck_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    report = gradcheck(lambda t: ag.sum_all(mul(t, t)), [x], tol=1e-7)
    assert report.passed
    assert np.allclose(x.grad, [2.0, 4.0])


def test_gradcheck_constant_function():
    x = Tensor([3.0, -1.0], requires_grad=True)
    report = gradcheck(lambda t: Tensor(7.0) + ag.sum_all(ag.scale(t, 0.0)), [x], tol=1e-9)
    assert report.passed
    assert np.allclose(x.grad, 0.0)


def test_gradcheck_softmax_mse_chain():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 4)) * 0.5, requires_grad=True)
    target = Tensor(rng.normal(size=(3, 4)) * 0.1)

    def f(t):
        return mse(softmax_lastdim(t), target)

    assert gradcheck(f, [x], tol=1e-5).passed


def test_gradcheck_rejects_nonfinite():
    x = Tensor([1.0], requires_grad=True)

    def f(t):
        return Tensor(np.inf) + ag.sum_all(t)

    with pytest.raises(NumericError):
        gradcheck(f, [x])


@pytest.mark.parametrize("op_name", [
    "add", "sub", "mul", "matmul", "softmax", "layernorm", "gelu",
    "embedding_like", "mse_masked", "cross_entropy", "token_at", "transpose",
])
def test_gradcheck_each_op_random_small_shapes(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**31)

    if op_name in ("add", "sub", "mul"):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        op = getattr(ag, op_name)
        f = lambda x, y: ag.sum_all(mul(op(x, y), op(x, y)))
        inputs = [a, b]
    elif op_name == "matmul":
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        f = lambda x, y: ag.sum_all(mul(matmul(x, y), matmul(x, y)))
        inputs = [a, b]
    elif op_name == "softmax":
        a = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 4)))
        f = lambda x: ag.sum_all(mul(softmax_lastdim(x), w))
        inputs = [a]
    elif op_name == "layernorm":
        a = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=5), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5)))
        f = lambda x, gg, bb: ag.sum_all(mul(layernorm(x, gg, bb), w))
        inputs = [a, g, b]
    elif op_name == "gelu":
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        f = lambda x: ag.sum_all(mul(ag.gelu(x), ag.gelu(x)))
        inputs = [a]
    elif op_name == "embedding_like":
        table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        ids = rng.integers(0, 6, size=(2, 4))
        w = Tensor(rng.normal(size=(2, 4, 3)))
        f = lambda t: ag.sum_all(mul(ag.embedding(t, ids), w))
        inputs = [table]
    elif op_name == "mse_masked":
        a = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
        mask = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        f = lambda x, y: mse(x, y, valid_mask=mask)
        inputs = [a, b]
    elif op_name == "cross_entropy":
        logits = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        labels = np.array([0, 1, 1, 0])
        f = lambda x: cross_entropy(x, labels)
        inputs = [logits]
    elif op_name == "token_at":
        a = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3)))
        f = lambda x: ag.sum_all(mul(ag.token_at(x, 1), w))
        inputs = [a]
    else:  # transpose
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2, 3)))
        f = lambda x: ag.sum_all(mul(ag.transpose(x, (2, 0, 1)), w))
        inputs = [a]

    assert gradcheck(f, inputs, tol=1e-5).passed


def test_backward_populates_every_reachable_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    c = Tensor([5.0, 6.0])  # constant: stays grad-free
    out = ag.sum_all(mul(ag.add(a, b), c))
    out.backward()
    assert a.grad is not None and b.grad is not None
    assert c.grad is None


def test_backward_bitwise_deterministic():
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=(4, 6))
    w0 = rng.normal(size=(6, 6))

    def run():
        x = Tensor(x0.copy(), requires_grad=True)
        w = Tensor(w0.copy(), requires_grad=True)
        h = ag.gelu(matmul(x, w))
        loss = mse(softmax_lastdim(h), Tensor(np.zeros((4, 6))))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_tape_entries_topologically_ordered():
    a = Tensor([1.0], requires_grad=True)
    b = mul(a, a)
    c = ag.add(b, a)
    d = mul(c, b)
    tape = ag.GradTape.from_root(d)
    seen = {id(a)}
    for entry in tape.entries:
        for inp in entry.inputs:
            if inp._entry is not None:
                assert id(inp) in seen, "input recorded after consumer"
        seen.add(id(entry.output))


def test_detach_blocks_gradient():
    a = Tensor([2.0], requires_grad=True)
    out = ag.sum_all(mul(a.detach(), Tensor([3.0])))
    assert not out.requires_grad


def test_grad_shape_matches_data():
    a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    ag.sum_all(mul(a, a)).backward()
    assert a.grad.shape == a.data.shape
