import numpy as np
import pytest

from reqdesc import autodiff as ad
from reqdesc.autodiff import Parameter, Tape, backward, check_gradients, forward
from reqdesc.errors import UnregisteredPrimitiveError, ZeroVectorError


def test_quadratic_value_and_grad():
    x = Parameter("x", np.array([1.0, 2.0]))
    loss, tape = forward(lambda t: ad.sum_(ad.mul(t.param(x), t.param(x))), [x], dtype=np.float64)
    assert loss == pytest.approx(5.0)
    grads = backward(tape)
    assert np.allclose(grads["x"], [2.0, 4.0])


def test_unused_parameter_gets_zero_grad():
    x = Parameter("x", np.array([1.0, 2.0]))
    y = Parameter("y", np.ones((2, 3)))
    _, tape = forward(lambda t: ad.sum_(ad.mul(t.param(x), 3.0)), [x, y])
    grads = backward(tape)
    assert np.array_equal(grads["y"], np.zeros((2, 3))) and y.grad.shape == y.shape


def test_log_softmax_by_hand():
    x = Parameter("x", np.zeros(2))
    loss, _ = forward(lambda t: ad.index(ad.log(ad.softmax(t.param(x))), 0), [x], dtype=np.float64)
    assert loss == pytest.approx(np.log(0.5))


def test_unregistered_primitive():
    tape = Tape()
    with pytest.raises(UnregisteredPrimitiveError):
        tape.apply("fft", tape.constant(np.ones(3)))


def test_l2_normalize_zero():
    tape = Tape()
    with pytest.raises(ZeroVectorError):
        ad.l2_normalize(tape.constant(np.zeros((1, 3))), axis=1)


def test_quadratic_passes_tight_check():
    x = Parameter("x", np.array([0.3, -1.2, 2.0]))
    rep = check_gradients(lambda t: ad.sum_(ad.mul(t.param(x), t.param(x))), [x], tol=1e-4)
    assert rep.passed, rep.lines()


def _rand(rng, *shape):
    return Parameter(f"p{rng.integers(1 << 30)}", rng.standard_normal(shape))


# one small closure per primitive, all checked against central differences
def _cases():
    rng = np.random.default_rng(0)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    img = _rand(rng, 2, 6, 6)
    w = _rand(rng, 3, 2, 3, 3)
    psi_l = _rand(rng, 2, 1, 3, 3)
    psi_g = _rand(rng, 2, 3, 4, 3, 3)
    feat = _rand(rng, 12, 6, 6)
    pts = np.array([[1.2, 2.7], [4.5, 0.3], [5.0, 5.0]])
    weights = rng.standard_normal((3, 4))
    return {
        "matmul+relu": ([a, b], lambda t: ad.sum_(ad.relu(ad.matmul(t.param(a), t.param(b))))),
        "exp+log": ([a], lambda t: ad.sum_(ad.log(ad.add(ad.exp(t.param(a)), 1.0)))),
        "softmax": ([a], lambda t: ad.sum_(ad.mul(ad.softmax(t.param(a), axis=1), weights))),
        "log_softmax": ([a], lambda t: ad.sum_(ad.mul(ad.log_softmax(t.param(a), axis=0), weights))),
        "shift": ([a], lambda t: ad.sum_(ad.mul(ad.shift(t.param(a), 3, axis=1), weights))),
        "transpose+reshape": ([a], lambda t: ad.sum_(ad.mul(ad.reshape(ad.transpose(t.param(a)), (3, 4)), weights))),
        "concat+index": ([a], lambda t: ad.sum_(ad.index(ad.concat([t.param(a), ad.mul(t.param(a), 2.0)], 0), (slice(1, 5), 2)))),
        "rot90": ([img], lambda t: ad.sum_(ad.mul(ad.rot90(t.param(img), 1), np.arange(72.0).reshape(2, 6, 6)))),
        "conv2d": ([img, w], lambda t: ad.sum_(ad.mul(ad.conv2d(t.param(img), t.param(w)), ad.conv2d(t.param(img), t.param(w))))),
        "avgpool+resize": ([img], lambda t: ad.sum_(ad.mul(ad.resize(ad.avgpool(t.param(img), 2), 5, 4), np.arange(40.0).reshape(2, 5, 4)))),
        "repeat": ([a], lambda t: ad.sum_(ad.mul(ad.repeat(t.param(a), 2, axis=0), np.arange(24.0).reshape(6, 4)))),
        "bilinear_sample": ([feat], lambda t: ad.sum_(ad.mul(ad.bilinear_sample(t.param(feat), pts), np.arange(36.0).reshape(3, 12)))),
        "l2_normalize": ([a], lambda t: ad.sum_(ad.mul(ad.l2_normalize(t.param(a), axis=1), weights))),
        "expand_lift": ([psi_l], lambda t: ad.sum_(ad.mul(ad.expand_lift(t.param(psi_l), 8), np.arange(144.0).reshape(16, 1, 3, 3)))),
        "expand_group": ([psi_g], lambda t: ad.sum_(ad.mul(ad.expand_group(t.param(psi_g), 4), np.arange(8 * 12 * 9.0).reshape(8, 12, 3, 3) % 7))),
    }


@pytest.mark.parametrize("name", list(_cases()))
def test_primitive_gradients(name):
    params, closure = _cases()[name]
    rep = check_gradients(closure, params, eps=1e-6, tol=1e-6)
    assert rep.passed, rep.lines()


def test_shift_and_rot90_adjoints():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 4))
    g = rng.standard_normal((3, 4, 4))
    tape = Tape(dtype=np.float64)
    p = Parameter("x", x)
    v = ad.shift(tape.param(p), 2, axis=0)
    tape.output = ad.sum_(ad.mul(v, g))
    assert np.allclose(backward(tape)["x"], np.roll(g, 2, axis=0))
    tape = Tape(dtype=np.float64)
    v = ad.rot90(tape.param(p), 1)
    tape.output = ad.sum_(ad.mul(v, g))
    assert np.allclose(backward(tape)["x"], np.rot90(g, 3, axes=(1, 2)))


def test_linearity():
    rng = np.random.default_rng(2)
    a = Parameter("a", rng.standard_normal((3, 3)))
    f1 = lambda t: ad.sum_(ad.exp(t.param(a)))
    f2 = lambda t: ad.sum_(ad.mul(t.param(a), t.param(a)))
    _, t1 = forward(f1, [a], dtype=np.float64)
    g1 = backward(t1)["a"].copy()
    _, t2 = forward(f2, [a], dtype=np.float64)
    g2 = backward(t2)["a"].copy()
    _, t3 = forward(lambda t: ad.add(ad.mul(f1(t), 2.0), ad.mul(f2(t), -3.0)), [a], dtype=np.float64)
    assert np.allclose(backward(t3)["a"], 2 * g1 - 3 * g2)


def test_relu_subgradient_at_zero():
    x = Parameter("x", np.array([0.0, 1.0, -1.0]))
    _, tape = forward(lambda t: ad.sum_(ad.relu(t.param(x))), [x], dtype=np.float64)
    assert backward(tape)["x"].tolist() == [0.0, 1.0, 0.0]


def test_corrupted_adjoint_fails():
    rng = np.random.default_rng(3)
    img = Parameter("img", rng.standard_normal((1, 5, 5)))
    w = Parameter("w", rng.standard_normal((2, 1, 3, 3)))
    closure = lambda t: ad.sum_(ad.mul(ad.conv2d(t.param(img), t.param(w)), 1.0))
    assert check_gradients(closure, [img, w], eps=1e-6).passed
    assert not check_gradients(closure, [img, w], eps=1e-6, corrupt="conv2d").passed


def test_check_restores_float32_values():
    x = Parameter("x", np.array([0.5, 1.5]))
    before = x.value.copy()
    check_gradients(lambda t: ad.sum_(ad.exp(t.param(x))), [x])
    assert x.value.dtype == np.float32 and np.array_equal(x.value, before)
