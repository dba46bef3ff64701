import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tempclip import tensor as tc
from tempclip.tensor import NonFiniteError, ShapeError, Tensor


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_hand_case():
    y = tc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(y.data, [[17.0], [39.0]])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    with tc.precision("float64"):
        y = tc.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(y, loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_two_logits():
    with tc.precision("float64"):
        y = tc.softmax(Tensor([0.0, np.log(3.0)])).data
    np.testing.assert_allclose(y, [0.25, 0.75], rtol=1e-12)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    with tc.precision("float64"):
        y = tc.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    assert y.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_survives_large_logits():
    y = tc.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(y, [0.5, 0.5])


def test_layer_norm_output_moments():
    with tc.precision("float64"):
        x = Tensor(np.random.default_rng(0).normal(3.0, 5.0, size=(4, 16)))
        y = tc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_rejects_width_one():
    with pytest.raises(ShapeError):
        tc.layer_norm(Tensor(np.ones((2, 1))), Tensor([1.0]), Tensor([0.0]))


def test_empty_tensor_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        tc.log(Tensor([0.0, 1.0]))


def test_l2_normalize_zero_vector():
    with pytest.raises(ZeroDivisionError):
        tc.l2_normalize(Tensor([[0.0, 0.0]]))


def test_backward_of_product_rule():
    with tc.precision("float64"):
        a = Tensor([2.0, 3.0], requires_grad=True)
        b = Tensor([5.0, 7.0], requires_grad=True)
        ga, gb = tc.grad(tc.sum(a * b), [a, b])
    np.testing.assert_array_equal(ga, [5.0, 7.0])
    np.testing.assert_array_equal(gb, [2.0, 3.0])


def test_shared_node_gradients_accumulate():
    with tc.precision("float64"):
        x = Tensor([3.0], requires_grad=True)
        (g,) = tc.grad(tc.sum(x * x + x), [x])
    np.testing.assert_allclose(g, [7.0])


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    gx, gy = tc.grad(tc.sum(x * x), [x, y])
    assert gy.tolist() == [0.0]


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        tc.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def _composite(P, x):
    h = tc.gelu(tc.linear(x, P["w1"], P["b1"]))
    h = tc.layer_norm(h, P["g"], P["b"])
    z = tc.take(tc.reshape(h, (3, 2, 4)), [1, 0, 1], axis=1)
    z = tc.concat([z, tc.exp(tc.scale(z, 0.1))], axis=2)
    logits = tc.matmul(tc.mean(z, axis=1), P["w2"])
    att = tc.softmax(tc.matmul(logits, tc.swap_last(logits)), axis=-1)
    logits = tc.matmul(att, tc.l2_normalize(logits))
    return tc.add(tc.cross_entropy(logits, [0, 2, 1]), tc.mean(tc.log_softmax(logits)))


def _composite_params(rng):
    return {"w1": rng.normal(size=(5, 4)), "b1": rng.normal(size=4), "g": rng.normal(size=4),
            "b": rng.normal(size=4), "w2": rng.normal(size=(8, 3))}


def test_backward_matches_central_differences():
    rng = np.random.default_rng(3)
    raw = _composite_params(rng)
    x = rng.normal(size=(6, 5))
    names = list(raw)
    with tc.precision("float64"):
        P = {n: Tensor(v, requires_grad=True) for n, v in raw.items()}
        bp = np.concatenate([g.reshape(-1) for g in tc.grad(_composite(P, Tensor(x)), P.values())])
        sizes = np.cumsum([0] + [raw[n].size for n in names])

        def f(flat):
            Q = {n: Tensor(flat[sizes[i]:sizes[i + 1]].reshape(raw[n].shape)) for i, n in enumerate(names)}
            return _composite(Q, Tensor(x)).item()

        flat = np.concatenate([raw[n].reshape(-1) for n in names])
        fd = tc.finite_difference_gradient(f, flat, step=1e-6)
    np.testing.assert_allclose(bp, fd, rtol=1e-6, atol=1e-8)


def test_backward_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(4)
    raw = _composite_params(rng)
    x = rng.normal(size=(6, 5))
    with tc.precision("float64"):
        P = {n: Tensor(v, requires_grad=True) for n, v in raw.items()}
        ours = tc.grad(_composite(P, Tensor(x)), P.values())
    T = {n: torch.tensor(v, requires_grad=True) for n, v in raw.items()}
    xt = torch.tensor(x)
    h = torch.nn.functional.gelu(xt @ T["w1"] + T["b1"], approximate="tanh")
    h = torch.nn.functional.layer_norm(h, (4,), T["g"], T["b"], eps=tc.LAYER_NORM_EPS)
    z = h.reshape(3, 2, 4)[:, [1, 0, 1], :]
    z = torch.cat([z, torch.exp(0.1 * z)], dim=2)
    logits = z.mean(dim=1) @ T["w2"]
    att = torch.softmax(logits @ logits.T, dim=-1)
    logits = att @ torch.nn.functional.normalize(logits, dim=-1)
    loss = torch.nn.functional.cross_entropy(logits, torch.tensor([0, 2, 1])) + \
        torch.log_softmax(logits, dim=-1).mean()
    loss.backward()
    for g, n in zip(ours, raw):
        np.testing.assert_allclose(g, T[n].grad.numpy(), rtol=1e-9, atol=1e-12)


def test_finite_difference_of_quadratic():
    g = tc.finite_difference_gradient(lambda v: float(v @ v), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(g, [2.0, -4.0, 1.0], atol=1e-8)


def test_finite_difference_selected_coordinates():
    g = tc.finite_difference_gradient(lambda v: float(np.sum(v ** 3)), np.array([1.0, 2.0, 3.0]), coords=[2, 0])
    np.testing.assert_allclose(g, [27.0, 3.0], rtol=1e-6)


def test_precision_context_restores_dtype():
    before = tc.get_dtype()
    with tc.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert tc.get_dtype() is before
    with pytest.raises(ValueError):
        tc.set_precision("float16")
