import math

import numpy as np
import pytest

from conftest import rel_err
from hnplan.errors import FormatError, NonFiniteGradient, ShapeMismatch
from hnplan.flowgen import IN_DIM
from hnplan.learner import (
    KIND_POLICY, Adam, Mlp, checkpoint_bytes, lr_at, parse_checkpoint, silu, time_embedding,
)
from hnplan.rng import Stream
from hnplan.trajectory import Standardizer

ARCHITECTURES = {"generator": [IN_DIM, 256, 256, 32], "policy": [49, 256, 256, 32]}


def reference_forward(net: Mlp, x):
    """Layer-by-layer loop written independently of Mlp.forward."""
    h = np.array(x, dtype=float)
    for i in range(len(net.weights)):
        z = np.zeros(net.weights[i].shape[1])
        for j in range(len(h)):
            z += h[j] * net.weights[i][j]
        z += net.biases[i]
        h = z if i == len(net.weights) - 1 else np.array([v / (1 + math.exp(-v)) for v in z])
    return h


# ---------------------------------------------------------------- forward


def test_zero_net_gives_zero():
    net = Mlp.zeros([5, 7, 3])
    assert np.array_equal(net(np.arange(5.0)), np.zeros(3))


def test_identity_layer():
    net = Mlp([np.eye(4)], [np.zeros(4)])
    x = np.array([1.0, -2.0, 3.5, 0.25])
    assert np.array_equal(net(x), x)


def test_forward_matches_reference(rng):
    for seed in range(5):
        net = Mlp.init([6, 9, 8, 3], Stream(seed, "t"))
        for b in range(3):
            for i in range(3):
                net.biases[b] = net.biases[b] + 0.1 * i
            x = rng.normal(size=6)
            assert np.allclose(net(x), reference_forward(net, x), rtol=1e-12, atol=1e-12)


def test_forward_batch_matches_rows(rng):
    net = Mlp.init([6, 9, 3], Stream(0, "t"))
    x = rng.normal(size=(5, 6))
    assert np.allclose(net(x), np.stack([net(r) for r in x]), atol=1e-14)


def test_shape_errors():
    net = Mlp.init([4, 5, 2], Stream(0, "t"))
    with pytest.raises(ShapeMismatch):
        net(np.zeros(3))
    _, cache = net.forward(np.zeros(4))
    with pytest.raises(ShapeMismatch):
        net.backward(cache, np.zeros(3))
    with pytest.raises(ShapeMismatch):
        Mlp([np.zeros((4, 5)), np.zeros((6, 2))], [np.zeros(5), np.zeros(2)])


def test_time_embedding_bounded():
    e = time_embedding(np.linspace(0, 1, 101))
    assert e.shape == (101, 8)
    assert np.all(np.abs(e) <= 1.0)
    assert np.allclose(e[0], [0, 0, 0, 0, 1, 1, 1, 1])


# ---------------------------------------------------------------- backward


def test_linear_half_square_gradient(rng):
    w = rng.normal(size=(4, 3))
    net = Mlp([w], [np.zeros(3)])
    x = rng.normal(size=4)
    out, cache = net.forward(x)
    grads, gx = net.backward(cache, out)  # d(0.5 |out|^2)/d out = out
    assert np.allclose(grads[0], np.outer(x, out))
    assert np.allclose(grads[1], out)
    assert np.allclose(gx[0], w @ out)


def test_zero_upstream_gives_zero_gradients(rng):
    net = Mlp.init([5, 8, 3], Stream(1, "t"))
    _, cache = net.forward(rng.normal(size=(2, 5)))
    grads, gx = net.backward(cache, np.zeros((2, 3)))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gx == 0)


def _loss(net, x, c, extra=None):
    out, cache = net.forward(x)
    val = float((c * out).sum())
    if extra is not None:
        val += float((extra * net.hidden(cache)).sum())
    return val


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_finite_difference_gradients(arch):
    """50 random (net, input) pairs; step 1e-3, relative error <= 1e-4."""
    widths = ARCHITECTURES[arch]
    h = 1e-3
    worst = 0.0
    for trial in range(50):
        st = Stream(trial, "fd", arch)
        net = Mlp.init(widths, st)
        x = st.normal((3, widths[0]))
        c = st.normal((3, widths[-1]))
        extra = st.normal((3, widths[-2]))  # upstream gradient from an auxiliary head
        _, cache = net.forward(x)
        grads, gx = net.backward(cache, c, grad_hidden=extra)

        idx = st.permutation(widths[0])[:8]
        fd = []
        for i in idx:
            xp, xm = x.copy(), x.copy()
            xp[0, i] += h
            xm[0, i] -= h
            fd.append((_loss(net, xp, c, extra) - _loss(net, xm, c, extra)) / (2 * h))
        worst = max(worst, rel_err(fd, gx[0, idx]))

        params = net.params()
        direction = [st.normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
        direction = [d / norm for d in direction]  # unit step of length h in parameter space
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
        plus = net.copy()
        plus.set_params([p + h * d for p, d in zip(params, direction)])
        minus = net.copy()
        minus.set_params([p - h * d for p, d in zip(params, direction)])
        numeric = (_loss(plus, x, c, extra) - _loss(minus, x, c, extra)) / (2 * h)
        worst = max(worst, rel_err(numeric, analytic))
    assert worst <= 1e-4


# ---------------------------------------------------------------- schedule


def test_lr_examples():
    assert lr_at(0) == 0.0
    assert lr_at(3) == 2e-4
    assert abs(lr_at(100)) <= 1e-12
    assert lr_at(1.5) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(51.5) == pytest.approx(1e-4, rel=1e-12)


def test_lr_continuous():
    e = np.linspace(0, 100, 100_001)
    lr = np.array([lr_at(v) for v in e])
    assert np.max(np.abs(np.diff(lr))) < 1e-6
    assert abs(lr_at(3 - 1e-12) - lr_at(3)) < 1e-15


# ---------------------------------------------------------------- optimizer


def test_zero_gradient_keeps_parameters():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p)
    opt.step(p, [np.zeros(2)], epoch=5)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_positive_gradient_decreases_parameter():
    p = [np.array([1.0])]
    Adam(p).step(p, [np.array([0.7])], epoch=5)
    assert p[0][0] < 1.0


def test_adam_first_step_size():
    p = [np.array([0.0])]
    Adam(p).step(p, [np.array([3.0])], epoch=3)
    assert p[0][0] == pytest.approx(-2e-4, rel=1e-6)


def test_non_finite_gradient_rejected():
    p = [np.zeros(2)]
    with pytest.raises(NonFiniteGradient):
        Adam(p).step(p, [np.array([np.nan, 0.0])], epoch=1)


def test_quadratic_loss_decreases():
    target = np.array([3.0, -1.0, 0.5])
    p = [np.zeros(3)]
    opt = Adam(p, peak_lr=0.05, warmup=0, total=100)
    losses = []
    for i in range(100):
        g = p[0] - target
        losses.append(0.5 * float(g @ g))
        opt.step(p, [g], epoch=i)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic():
    def run():
        st = Stream(9, "det")
        net = Mlp.init([4, 8, 2], st)
        x, y = st.normal((16, 4)), st.normal((16, 2))
        opt = Adam(net.params(), peak_lr=1e-2)
        for i in range(20):
            out, cache = net.forward(x)
            grads, _ = net.backward(cache, out - y)
            opt.step(net.params(), grads, i)
        return net

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a.params(), b.params()))


# ---------------------------------------------------------------- checkpoints


def _checkpoint(rng):
    main = Mlp.init([5, 6, 3], Stream(0, "ck"))
    aux = Mlp.init([6, 4], Stream(1, "ck"))
    st = Standardizer(rng.normal(size=32), rng.uniform(0.5, 2, 32))
    return main, aux, st, checkpoint_bytes(KIND_POLICY, main, aux, st, 100, 7)


def test_checkpoint_layout(rng):
    main, aux, st, data = _checkpoint(rng)
    assert data[:5] == b"HNPL1" and data[5] == KIND_POLICY
    assert int.from_bytes(data[6:10], "little") == 2
    n_floats = 5 * 6 + 6 + 6 * 3 + 3 + 6 * 4 + 4 + 64
    assert len(data) == 6 + 4 * (1 + 3) + 4 * (1 + 2) + 4 * n_floats + 8


def test_checkpoint_round_trip(rng):
    main, aux, st, data = _checkpoint(rng)
    ck = parse_checkpoint(data)
    assert ck["kind"] == KIND_POLICY and ck["epoch"] == 100 and ck["seed"] == 7
    for a, b in zip(main.params(), ck["main"].params()):
        assert np.array_equal(a.astype(np.float32), b)
    assert np.array_equal(st.std.astype(np.float32), ck["standardizer"].std)
    assert checkpoint_bytes(KIND_POLICY, ck["main"], ck["aux"], ck["standardizer"], 100, 7) == data


@pytest.mark.parametrize("mutate", [lambda d: b"XXXXX" + d[5:], lambda d: d[:-3], lambda d: d + b"\0"])
def test_checkpoint_rejects_corruption(rng, mutate):
    *_, data = _checkpoint(rng)
    with pytest.raises(FormatError):
        parse_checkpoint(mutate(data))


def test_silu_values():
    assert silu(0.0) == 0.0
    assert silu(50.0) == pytest.approx(50.0)
    assert silu(-50.0) == pytest.approx(0.0, abs=1e-18)
