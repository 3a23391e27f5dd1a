import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualsrc import autodiff as ad


def grad1(f, x):
    tape = ad.Tape()
    v = tape.variable(x)
    (g,) = tape.gradient(f(v), [v])
    return g


def test_analytic_derivatives():
    assert grad1(lambda x: x * x, 3.0) == 6.0
    assert grad1(ad.relu, -1.0) == 0.0
    assert grad1(ad.relu, 2.0) == 1.0
    assert grad1(ad.softplus, 0.0) == 0.5
    assert grad1(ad.exp, 0.0) == 1.0
    assert grad1(ad.log, 2.0) == 0.5
    assert grad1(ad.tanh, 0.0) == 1.0


def test_subgradient_conventions():
    assert grad1(ad.relu, 0.0) == 0.0
    tape = ad.Tape()
    a, b = tape.variable(2.0), tape.variable(2.0)
    ga, gb = tape.gradient(ad.minimum(a, b), [a, b])
    assert (ga, gb) == (1.0, 0.0)


def test_div_and_log_domain():
    tape = ad.Tape()
    x = tape.variable(1.0)
    with pytest.raises(ad.NumericError):
        ad.div(x, 0.0)
    with pytest.raises(ad.NumericError):
        ad.log(ad.sub(x, 1.0))


def test_non_finite_carries_provenance():
    tape = ad.Tape()
    x = tape.variable(800.0)
    with pytest.raises(ad.NumericError, match="exp"):
        ad.exp(x)


def test_broadcast_gradient_is_reduced():
    tape = ad.Tape()
    b = tape.variable(np.array([1.0, 2.0]))
    m = tape.variable(np.ones((3, 2)))
    gb, gm = tape.gradient(ad.sum(ad.mul(m, b)), [b, m])
    np.testing.assert_array_equal(gb, [3.0, 3.0])
    np.testing.assert_array_equal(gm, np.tile([1.0, 2.0], (3, 1)))


def test_tape_topological_order():
    tape = ad.Tape()
    x = tape.variable(1.5)
    y = ad.add(ad.mul(x, x), ad.exp(x))
    for node, parents in enumerate(tape.parents):
        assert all(p < node for p in parents)
    assert y.index == len(tape) - 1


def reference_forward(sizes, flat, x):
    """Plain-numpy MLP written from the parameter layout description."""
    h = np.asarray(x, dtype=float)
    k = 0
    n_layers = len(sizes) - 1
    for layer, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = np.array(flat[k:k + a * b]).reshape(a, b)
        k += a * b
        bias = np.array(flat[k:k + b])
        k += b
        h = h @ w + bias
        if layer < n_layers - 1:
            h = np.tanh(h)
    return h


def test_mlp_identity_and_bias():
    p = ad.MlpParams((2, 2), np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(ad.mlp_forward(p, np.array([1.0, 2.0])), [1.0, 2.0])
    z = ad.MlpParams.zeros((3, 4, 2))
    flat = z.flat.copy()
    flat[-2:] = [0.7, -1.2]
    np.testing.assert_array_equal(ad.mlp_forward(z.with_flat(flat), np.ones(3)), [0.7, -1.2])


def test_mlp_matches_reference():
    p = ad.MlpParams.init((5, 7, 3), seed=42)
    x = np.random.default_rng(0).normal(size=5)
    np.testing.assert_allclose(ad.mlp_forward(p, x), reference_forward(p.sizes, p.flat, x), rtol=0, atol=1e-14)
    xs = np.random.default_rng(1).normal(size=(4, 5))
    np.testing.assert_allclose(ad.mlp_forward(p, xs), reference_forward(p.sizes, p.flat, xs), atol=1e-14)


def test_mlp_width_mismatch():
    p = ad.MlpParams.init((3, 2), seed=0)
    with pytest.raises(ValueError):
        ad.mlp_forward(p, np.ones(4))


def test_param_count():
    assert ad.param_count((5, 7, 3)) == 6 * 7 + 8 * 3
    assert ad.MlpParams.init((5, 7, 3)).flat.size == 66


def test_grad_check_square():
    assert ad.grad_check(lambda x: ad.sum(ad.square(x)), [1.5]) < 1e-6


def test_grad_check_mlp_loss():
    p = ad.MlpParams.init((4, 6, 2), seed=1)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(8, 4)), rng.normal(size=(8, 2))

    def loss(theta):
        out = ad.mlp_apply(p.layers(theta), x)
        return ad.sum(ad.square(ad.sub(out, y)))

    assert ad.grad_check(loss, p.flat) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.normal(size=(4, 2))

    def f(x):
        h = ad.matmul(ad.reshape(x, (3, 4)), b)
        first = ad.expand_dims(ad.tanh(ad.getitem(h, (slice(None), 0))), -1)
        h = ad.concat([ad.softplus(h), first], axis=1)
        return ad.add(ad.sum(ad.div(h, 3.0)), ad.sum(ad.log(ad.add(ad.square(x), 1.0))))

    assert ad.grad_check(f, a.ravel()) < 1e-5


def test_stack_and_dot_gradients():
    rng = np.random.default_rng(3)
    c = rng.normal(size=3)

    def f(x):
        s = ad.stack([x, ad.mul(x, 2.0)], axis=0)
        return ad.add(ad.dot(ad.getitem(s, 1), c), ad.sum(ad.exp(ad.mul(x, 0.1))))

    assert ad.grad_check(f, rng.normal(size=3)) < 1e-7


def test_straight_through():
    tape = ad.Tape()
    x = tape.variable(np.array([3.0, 0.4]))
    y = ad.straight_through(x, np.array([5.0, 0.0]))
    np.testing.assert_array_equal(y.value, [5.0, 0.0])
    (g,) = tape.gradient(ad.sum(y), [x])
    np.testing.assert_array_equal(g, [1.0, 0.0])


def test_gradient_deterministic():
    p = ad.MlpParams.init((4, 8, 2), seed=5)
    x = np.random.default_rng(0).normal(size=(16, 4))

    def run():
        tape = ad.Tape()
        theta = tape.variable(p.flat)
        return tape.gradient(ad.sum(ad.softplus(ad.mlp_apply(p.layers(theta), x))), [theta])[0]

    assert run().tobytes() == run().tobytes()


def test_adam_and_sgd_steps():
    sgd = ad.Sgd(0.1)
    np.testing.assert_allclose(sgd.update(np.array([1.0]), np.array([2.0]), ascend=True), [1.2])
    adam = ad.Adam(0.01)
    out = adam.update(np.zeros(2), np.array([5.0, -0.1]))
    # the first Adam step has magnitude step_size in every coordinate
    np.testing.assert_allclose(out, [-0.01, 0.01], rtol=1e-6)
    assert ad.Adam(0.0).update(np.ones(2), np.ones(2)).tolist() == [1.0, 1.0]


def test_params_round_trip(tmp_path):
    p = ad.MlpParams.init((3, 5, 2), seed=9, activation="relu")
    ad.save_params(tmp_path / "p.bin", p, {"note": "x"})
    q, header = ad.load_params(tmp_path / "p.bin")
    assert q.sizes == p.sizes and q.activation == "relu" and q.seed == 9
    assert q.flat.tobytes() == p.flat.tobytes()
    assert header["note"] == "x"


def test_params_truncated(tmp_path):
    p = ad.MlpParams.init((3, 5, 2), seed=9)
    path = tmp_path / "p.bin"
    ad.save_params(path, p)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(ValueError):
        ad.load_params(path)
    path.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError):
        ad.load_params(path)
