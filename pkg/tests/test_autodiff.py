import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from respmtl.autodiff import (Adam, AdamState, AllMasked, AxisOutOfRange, ClassIndexOutOfRange, DetachedLoss,
                              EmptyClass, LayerNorm, Linear, NameSetMismatch, NonScalarLoss, Parameter,
                              ShapeMismatch, Tape, Tensor, adam_step, backward, class_weights, concat, gelu,
                              grad_check, l2_pairwise_reg, layer_norm, load_checkpoint, log_softmax, matmul,
                              mean, mul, no_grad, pick, reshape, save_checkpoint, softmax, square, sum_, take,
                              transpose, weighted_cross_entropy)
from respmtl.autodiff import tensor as T


def P(a):
    return Parameter(np.array(a, dtype=np.float64))


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        up = f()
        flat[i] = o - h
        down = f()
        flat[i] = o
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


# ------------------------------------------------------------- forward ops

def test_matmul_identity(rng):
    A = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_layer_norm_standardises():
    x = np.array([1.0, 2.0, 3.0])
    y = layer_norm(Tensor(x), eps=1e-5).data
    np.testing.assert_allclose(y, (x - 2.0) / np.sqrt(2 / 3 + 1e-5), rtol=1e-12)
    assert abs(y.mean()) < 1e-12
    # eps inside the root shrinks the variance by a factor 1 / (1 + 1.5e-5)
    assert abs(y.var() - 1) < 2e-5


def test_log_softmax_is_log_of_softmax(rng):
    x = Tensor(rng.normal(size=(4, 6)) * 10)
    np.testing.assert_allclose(log_softmax(x).data, np.log(softmax(x).data), atol=1e-12)


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 17)
    want = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(gelu(Tensor(x)).data, want, rtol=1e-14)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))
    with pytest.raises(AxisOutOfRange):
        softmax(Tensor(np.ones((2, 3))), axis=2)
    with pytest.raises(AxisOutOfRange):
        concat([Tensor(np.ones(2)), Tensor(np.ones(2))], axis=1)


def test_take_and_pick():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(take(table, [3, 0]).data, [[9, 10, 11], [0, 1, 2]])
    np.testing.assert_array_equal(pick(table, [2, 0, 1, 1]).data, [2, 3, 7, 10])


def test_float32_graphs_stay_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    assert (x * 0.5 + 1.0).dtype == np.float32
    assert gelu(x).dtype == np.float32


# ------------------------------------------------------------- backward

def test_linear_case_grad_is_input(rng):
    x = rng.normal(size=5)
    w = P(rng.normal(size=5))
    backward(sum_(mul(w, x)))
    np.testing.assert_array_equal(w.grad, x)


def test_backward_linearity(rng):
    x = rng.normal(size=(3, 4))
    w = P(rng.normal(size=(4, 2)))

    def l1():
        return sum_(square(matmul(Tensor(x), w)))

    def l2():
        return mean(gelu(matmul(Tensor(x), w)))

    backward(l1())
    g1 = w.grad.copy()
    w.grad = None
    backward(l2())
    g2 = w.grad.copy()
    w.grad = None
    backward(l1() + l2())
    np.testing.assert_allclose(w.grad, g1 + g2, rtol=1e-12)


def test_grad_accumulates_across_calls():
    w = P([1.0, 2.0])
    backward(sum_(w))
    backward(sum_(w))
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_non_scalar_and_detached_losses():
    w = P([1.0, 2.0])
    with pytest.raises(NonScalarLoss):
        backward(w * 2.0)
    with pytest.raises(DetachedLoss):
        backward(Tensor(3.0))


def test_no_grad_builds_no_graph():
    w = P([1.0, 2.0])
    with no_grad():
        y = sum_(w * 3.0)
    assert not y.requires_grad
    assert y._parents == ()


def test_tape_is_topological():
    a = P(np.ones(2))
    b = mul(a, 2.0)
    c = add_ = b + a
    loss = sum_(add_)
    tape = Tape.from_output(loss)
    pos = {id(r.output): i for i, r in enumerate(tape.records)}
    assert pos[id(b)] < pos[id(c)] < pos[id(loss)]


def test_shared_subexpression_counted_once():
    w = P([3.0])
    h = w * w
    backward(sum_(h + h))
    np.testing.assert_allclose(w.grad, [12.0])


OPS = {
    "matmul": lambda a, b: sum_(square(matmul(a, b))),
    "batched_matmul": lambda a, b: sum_(square(matmul(reshape(a, (1, 3, 4)), b))),
    "mul_broadcast": lambda a, b: sum_(square(mul(a, reshape(mean(b, axis=0), (1, 4))))),
    "gelu": lambda a, b: sum_(gelu(a)),
    "layer_norm": lambda a, b: sum_(mul(square(layer_norm(a, mean(b, axis=0), sum_(b, axis=0))), np.arange(4.0))),
    "softmax": lambda a, b: sum_(mul(softmax(a), np.arange(12.0).reshape(3, 4))),
    "log_softmax": lambda a, b: sum_(mul(log_softmax(a, axis=0), np.arange(12.0).reshape(3, 4))),
    "mean_axis": lambda a, b: sum_(square(mean(a, axis=0))),
    "transpose": lambda a, b: sum_(square(matmul(transpose(a), a))),
    "concat": lambda a, b: sum_(mul(square(concat([a, b], axis=0)), np.arange(28.0).reshape(7, 4))),
    "take": lambda a, b: sum_(square(take(a, [2, 0, 2]))),
    "pick": lambda a, b: sum_(square(pick(a, [3, 1, 0]))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    a = P(rng.normal(size=(3, 4)))
    b = P(rng.normal(size=(4, 4)))
    f = OPS[name]
    report = grad_check(lambda: f(a, b), {"a": a, "b": b}, tolerance=1e-6)
    assert report.passed, report.per_param


def test_grad_check_linear_is_exact(rng):
    w = P(rng.normal(size=(5, 3)))
    x = rng.normal(size=(4, 5))
    c = rng.normal(size=(4, 3))
    report = grad_check(lambda: sum_(mul(matmul(Tensor(x), w), c)), {"w": w})
    assert report.max_rel_error < 1e-10


def test_grad_check_three_layer_mlp(rng):
    layers = [Linear(6, 5, rng), Linear(5, 4, rng), Linear(4, 3, rng)]
    x = rng.normal(size=(7, 6))
    y = rng.integers(0, 3, size=7)
    params = {f"{i}.{n}": p for i, layer in enumerate(layers) for n, p in layer.parameters().items()}

    def loss():
        h = Tensor(x)
        for layer in layers[:-1]:
            h = gelu(layer(h))
        return weighted_cross_entropy(layers[-1](h), y)

    assert grad_check(loss, params).passed


def test_grad_check_detects_corrupted_rule(monkeypatch, rng):
    good = T.gelu

    def bad_gelu(x):
        out = good(x)
        inner = out._backward
        out._backward = lambda g: [2.0 * gi for gi in inner(g)]
        return out

    monkeypatch.setattr(T, "gelu", bad_gelu)
    w = P(rng.normal(size=(3, 3)))
    report = grad_check(lambda: sum_(T.gelu(w)), {"w": w})
    assert not report.passed
    assert report.failures == ["w"]


# ---------------------------------------------------------------- losses

def test_wce_confident_is_zero():
    logits = Tensor(np.array([[1000.0, 0.0], [0.0, 1000.0]]))
    assert weighted_cross_entropy(logits, [0, 1], [5.0, 0.1]).item() == 0.0


def test_wce_uniform_two_class():
    assert weighted_cross_entropy(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == pytest.approx(np.log(2), abs=1e-15)


def test_wce_hand_value():
    # row 0: logits (1, 0), target 0; row 1: logits (0, 2), target 1; weights (1, 3)
    lp0 = 1 - np.log(np.e + 1)
    lp1 = 2 - np.log(1 + np.e**2)
    want = -(1 * lp0 + 3 * lp1) / 4
    got = weighted_cross_entropy(Tensor(np.array([[1.0, 0.0], [0.0, 2.0]])), [0, 1], [1.0, 3.0]).item()
    assert got == pytest.approx(want, rel=1e-14)


@given(st.integers(1, 6), st.integers(2, 5), st.floats(0.1, 10), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_wce_uniform_weights_equal_plain_ce(n, k, scale, seed):
    r = np.random.default_rng(seed)
    z = r.normal(size=(n, k)) * scale
    y = r.integers(0, k, size=n)
    plain = -np.mean(z[np.arange(n), y] - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) - z.max(1))
    got = weighted_cross_entropy(Tensor(z), y, np.full(k, 2.5)).item()
    assert got == pytest.approx(plain, rel=1e-12)


def test_wce_mask_drops_rows(rng):
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    mask = np.array([True, False, True, False])
    full = weighted_cross_entropy(Tensor(z[mask]), y[mask]).item()
    # garbage targets under the mask must be ignored
    assert weighted_cross_entropy(Tensor(z), [0, 99, 1, -5], mask=mask).item() == pytest.approx(full, rel=1e-14)


def test_wce_errors():
    with pytest.raises(AllMasked):
        weighted_cross_entropy(Tensor(np.zeros((2, 2))), [0, 1], mask=[False, False])
    with pytest.raises(ClassIndexOutOfRange):
        weighted_cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])


def test_class_weights():
    np.testing.assert_allclose(class_weights([147, 3995]), [4142 / 294, 4142 / 7990], rtol=1e-15)
    np.testing.assert_allclose(class_weights([10, 10]), [1, 1])
    np.testing.assert_allclose(class_weights([1, 1, 2]), [4 / 3, 4 / 3, 2 / 3])
    with pytest.raises(EmptyClass):
        class_weights([3, 0])


def test_l2_pairwise_examples():
    a = {"w": P([1.0, 2.0])}
    assert l2_pairwise_reg([a, {"w": P([1.0, 2.0])}], None, 1.0).item() == 0.0
    assert l2_pairwise_reg([{"w": P([1.0, 0.0])}, {"w": P([0.0, 0.0])}], None, 1.0).item() == 1.0
    three = [{"w": P(v)} for v in (0.0, 1.0, 3.0)]
    assert l2_pairwise_reg(three, None, 0.1).item() == pytest.approx(1.4, rel=1e-12)


def test_l2_pairwise_layer_filter_and_errors():
    e1 = {"a": P([1.0]), "b": P([5.0])}
    e2 = {"a": P([0.0]), "b": P([0.0])}
    assert l2_pairwise_reg([e1, e2], ["a"], 1.0).item() == 1.0
    with pytest.raises(NameSetMismatch):
        l2_pairwise_reg([e1, {"a": P([0.0])}], None, 1.0)
    with pytest.raises(ShapeMismatch):
        l2_pairwise_reg([{"a": P([1.0])}, {"a": P([1.0, 2.0])}], None, 1.0)


def test_l2_pairwise_gradient_pulls_together(rng):
    encs = [{"w": P(rng.normal(size=4))} for _ in range(3)]

    def spread():
        return sum(float(np.sum((encs[i]["w"].data - encs[j]["w"].data) ** 2)) for i in range(3) for j in range(i))

    before = spread()
    backward(l2_pairwise_reg(encs, None, 0.1))
    for e in encs:
        e["w"].data -= 1e-3 * e["w"].grad
    assert spread() < before


# ---------------------------------------------------------------- Adam

def test_adam_first_step():
    w = P([0.5])
    state = AdamState(lr=0.1)
    adam_step({"w": w}, {"w": np.array([1.0])}, state)
    assert w.data[0] - 0.5 == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_grad_no_change():
    w = P([0.5, -1.0])
    adam_step({"w": w}, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(w.data, [0.5, -1.0])


def test_adam_two_steps_unrolled():
    g, lr, b1, b2, eps = 0.3, 0.01, 0.9, 0.999, 1e-8
    w = P([2.0])
    state = AdamState(lr=lr)
    theta, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        adam_step({"w": w}, {"w": np.array([g])}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert w.data[0] == pytest.approx(theta, rel=1e-12)
    assert state.t == 2


def test_adam_shape_mismatch_and_skip():
    w, u = P([1.0, 2.0]), P([3.0])
    with pytest.raises(ShapeMismatch):
        adam_step({"w": w}, {"w": np.ones(3)}, AdamState())
    opt = Adam({"w": w, "u": u}, lr=0.1)
    w.grad = np.ones(2)
    opt.step()
    assert u.data[0] == 3.0 and "u" not in opt.state.m


# ------------------------------------------------------------ modules, IO

def test_layer_norm_module_and_names(rng):
    ln = LayerNorm(4)
    assert set(ln.parameters()) == {"gamma", "beta"}
    x = Tensor(rng.normal(size=(2, 4)))
    np.testing.assert_allclose(ln(x).data, layer_norm(x).data)


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.w": P(rng.normal(size=(3, 2))), "b": P(rng.normal(size=4))}
    state = AdamState(lr=0.01, t=3, m={"b": np.ones(4)}, v={"b": np.full(4, 2.0)})
    save_checkpoint(tmp_path / "x.ckpt", params, state, {"k": [1, 2]})
    arrays, st2, meta = load_checkpoint(tmp_path / "x.ckpt")
    for n, p in params.items():
        np.testing.assert_array_equal(arrays[n], p.data)
    assert st2.t == 3 and st2.lr == 0.01
    np.testing.assert_array_equal(st2.v["b"], state.v["b"])
    assert meta == {"k": [1, 2]}
    save_checkpoint(tmp_path / "y.ckpt", params, state, {"k": [1, 2]})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
