import numpy as np
import pytest

from rvar import autodiff as ad

from oracles import central_diff, naive_cell, rel_err


def test_forward_examples():
    t = ad.Tape()
    assert ad.sigmoid(t.variable(0.0)).value == 0.5
    assert ad.sum_sq(t.variable([3.0, 4.0])).value == 25.0


def test_matvec_against_naive_loop():
    rng = np.random.default_rng(0)
    w, x = rng.normal(size=(3, 3)), rng.normal(size=3)
    got = ad.matvec(ad.Tape().variable(w), x).value
    expected = np.array([sum(w[i, j] * x[j] for j in range(3)) for i in range(3)])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)


def test_square_derivative():
    t = ad.Tape()
    x = t.variable(3.0)
    assert t.backward(x * x)[x] == 6.0


def test_sum_sq_of_matvec_closed_form():
    rng = np.random.default_rng(1)
    w, x0 = rng.normal(size=(4, 4)), rng.normal(size=4)
    t = ad.Tape()
    x = t.variable(x0)
    g = t.backward(ad.sum_sq(ad.matvec(w, x)))[x]
    np.testing.assert_allclose(g, 2 * w.T @ w @ x0, rtol=1e-13)


def _composed_cell(x, h, c, w, b, u):
    z = ad.matvec(w, ad.concat([x, h])) + b
    i = ad.sigmoid(z[0:u])
    f = ad.sigmoid(z[u:2 * u])
    g = ad.tanh(z[2 * u:3 * u])
    o = ad.sigmoid(z[3 * u:])
    c2 = f * c + i * g
    return o * ad.tanh(c2), c2


@pytest.mark.parametrize("fused", [False, True])
def test_lstm_cell_loss_against_finite_differences(fused):
    rng = np.random.default_rng(2)
    d, u = 3, 4
    args = dict(x=rng.normal(size=d), h=rng.normal(size=u), c=rng.normal(size=u),
                w=rng.normal(scale=0.5, size=(4 * u, d + u)), b=rng.normal(size=4 * u))
    weights = rng.normal(size=2 * u)

    def loss_value(vals):
        h2, c2 = naive_cell(vals["w"], vals["b"], vals["x"], vals["h"], vals["c"])
        return float(np.sum((weights * np.concatenate([h2, c2])) ** 2))

    t = ad.Tape()
    vs = {k: t.variable(v) for k, v in args.items()}
    if fused:
        h2, c2 = ad.lstm_cell(ad.reshape(vs["x"], (1, d)), ad.reshape(vs["h"], (1, u)),
                              ad.reshape(vs["c"], (1, u)), vs["w"], vs["b"])
        out = ad.concat([ad.reshape(h2, (u,)), ad.reshape(c2, (u,))])
    else:
        h2, c2 = _composed_cell(vs["x"], vs["h"], vs["c"], vs["w"], vs["b"], u)
        out = ad.concat([h2, c2])
    loss = ad.sum_sq(out * weights)
    assert float(loss.value) == pytest.approx(loss_value(args), rel=1e-13)
    grads = t.backward(loss)
    for name, var in vs.items():
        g = grads[var]
        for idx in np.ndindex(g.shape):
            fd = central_diff(lambda v: loss_value({**args, name: v}), args[name], idx)
            assert rel_err(g[idx], fd, floor=1e-7) < 1e-6, (name, idx)


UNARY = {"sigmoid": ad.sigmoid, "tanh": ad.tanh, "relu": ad.relu,
         "sum_sq": ad.sum_sq, "total": ad.total, "neg": ad.neg}


def _primitive_cases(rng):
    """(name, builder(vars) -> Var, input arrays)."""
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w, v = rng.normal(size=(4, 5)), rng.normal(size=5)
    yield "add", lambda p, q: p + q, [a, rng.normal(size=4)]
    yield "sub", lambda p, q: p - q, [a, b]
    yield "mul", lambda p, q: p * q, [a, b]
    yield "matvec", ad.matvec, [w, v]
    yield "matmul", ad.matmul, [rng.normal(size=(2, 3, 4)), w]
    yield "concat", lambda p, q: ad.concat([p, q], axis=0), [a, b]
    yield "stack", lambda p, q: ad.stack([p, q], axis=1), [a, b]
    yield "slice", lambda p: p[1:, ::2], [a]
    yield "reshape", lambda p: ad.reshape(p, (4, 3)), [a]
    for name, fn in UNARY.items():
        x = rng.normal(size=(3, 4))
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep off the kink
        yield name, fn, [x]


def test_every_primitive_matches_finite_differences():
    rng = np.random.default_rng(3)
    trials = 0
    for _ in range(8):
        for name, fn, inputs in _primitive_cases(rng):
            proj = None

            def scalar(vals):
                t = ad.Tape()
                out = fn(*[t.constant(x) for x in vals])
                return float(np.sum(out.value * proj))

            t = ad.Tape()
            vs = [t.variable(x) for x in inputs]
            out = fn(*vs)
            proj = rng.normal(size=out.shape)
            loss = ad.total(out * proj)
            grads = t.backward(loss)
            for k, (var, x) in enumerate(zip(vs, inputs)):
                idx = tuple(int(rng.integers(n)) for n in x.shape)
                fd = central_diff(lambda xk: scalar(inputs[:k] + [xk] + inputs[k + 1:]), x, idx)
                assert rel_err(grads[var][idx], fd, floor=1e-7) < 1e-6, name
                trials += 1
    assert trials >= 100


def test_linearity_exact_on_same_tape():
    rng = np.random.default_rng(4)
    x0, w = rng.normal(size=5), rng.normal(size=(5, 5))

    def grads_of(builder):
        t = ad.Tape()
        x = t.variable(x0)
        return t.backward(builder(x))[x]

    f = lambda x: ad.sum_sq(ad.tanh(ad.matvec(w, x)))
    g = lambda x: ad.total(ad.sigmoid(x) * x)
    combined = grads_of(lambda x: f(x) * 2.0 + g(x) * -0.5)
    np.testing.assert_array_equal(combined, 2.0 * grads_of(f) - 0.5 * grads_of(g))


def test_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    x0, w = rng.normal(size=(2, 6)), rng.normal(size=(24, 9))

    def run():
        t = ad.Tape()
        x = t.variable(x0)
        h, c = ad.lstm_cell(x, np.zeros((2, 3)), np.zeros((2, 3)), w[:12], np.zeros(12))
        return t.backward(ad.sum_sq(h) + ad.total(c))[x]

    assert run().tobytes() == run().tobytes()


def test_unreached_variable_gets_zero_gradient():
    t = ad.Tape()
    x, y = t.variable([1.0, 2.0]), t.variable(3.0)
    grads = t.backward(ad.sum_sq(x))
    assert grads[y] == 0.0
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_tape_errors():
    t = ad.Tape()
    x = t.variable([1.0, 2.0])
    with pytest.raises(ad.TapeError):
        t.backward(x * 2.0)  # non-scalar seed
    t.backward(ad.sum_sq(x))
    with pytest.raises(ad.TapeError):
        ad.sum_sq(x)
    with pytest.raises(ad.TapeError):
        t.backward(ad.sum_sq(x))
    t2 = ad.Tape()
    with pytest.raises(ValueError):
        t2.variable(np.zeros(3)) + np.zeros(4)
    with pytest.raises(ValueError):
        ad.matvec(t2.variable(np.zeros((2, 3))), np.zeros(2))
    with pytest.raises(ad.TapeError):
        t2.variable(1.0) + ad.Tape().variable(1.0)
