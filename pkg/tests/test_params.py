import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import rel_err
from xcalsurv.params import (Parameterization, backward, finite_difference_gradient, forward,
                             init_params, load_params, save_params)


def reference_forward(sizes, theta, x):
    # straight-line evaluator over the flat vector, written independently of unpack
    h, pos = x, 0
    for k in range(len(sizes) - 1):
        fi, fo = sizes[k], sizes[k + 1]
        W = theta[pos:pos + fi * fo].reshape(fi, fo)
        pos += fi * fo
        b = theta[pos:pos + fo]
        pos += fo
        h = h @ W + b
        if k < len(sizes) - 2:
            h = np.maximum(h, 0.0)
    return h


def test_zero_linear_map():
    p = Parameterization(3, 2)
    assert np.array_equal(forward(p, np.zeros(p.n_params), np.array([1.0, -4.0, 2.0])), [0.0, 0.0])


def test_identity_layer():
    p = Parameterization(2, 2)
    theta = np.zeros(p.n_params)
    theta[p.layout[(0, "weight")]] = np.eye(2).ravel()
    assert np.allclose(forward(p, theta, np.array([1.0, 2.0])), [1.0, 2.0])


@pytest.mark.parametrize("hidden", [(), (5,), (4, 3)])
def test_forward_matches_reference(hidden, rng):
    p = Parameterization(6, 3, hidden)
    theta = rng.standard_normal(p.n_params)
    x = rng.standard_normal((7, 6))
    assert np.allclose(forward(p, theta, x), reference_forward(p.sizes, theta, x), atol=1e-12)


def test_layout_disjoint_covering():
    p = Parameterization(4, 2, (3, 5))
    covered = np.zeros(p.n_params, dtype=int)
    for sl in p.layout.values():
        covered[sl] += 1
    assert np.all(covered == 1)


def test_linear_jacobian():
    p = Parameterization(3, 2)
    x = np.array([0.5, -1.0, 2.0])
    g = backward(p, np.zeros(p.n_params), x, np.array([0.0, 1.0]))
    W = g[p.layout[(0, "weight")]].reshape(3, 2)
    assert np.array_equal(W[:, 1], x) and np.all(W[:, 0] == 0)
    assert np.array_equal(g[p.layout[(0, "bias")]], [0.0, 1.0])


def test_kink_subgradient_zero():
    p = Parameterization(1, 1, (1,))
    theta = np.zeros(p.n_params)
    theta[p.layout[(1, "weight")]] = 1.0
    g = backward(p, theta, np.array([1.0]), np.array([1.0]))
    assert g[p.layout[(0, "weight")]][0] == 0.0 and g[p.layout[(0, "bias")]][0] == 0.0


@given(st.integers(0, 10**6), st.sampled_from([(), (4,), (3, 3)]))
def test_backward_matches_fd(seed, hidden):
    r = np.random.default_rng(seed)
    p = Parameterization(3, 2, hidden)
    theta = r.standard_normal(p.n_params)
    x = r.standard_normal((5, 3))
    up = r.standard_normal((5, 2))
    # a smooth downstream loss of the outputs
    f = lambda th: float(np.sum(up * np.tanh(forward(p, th, x))))
    out = forward(p, theta, x)
    g = backward(p, theta, x, up * (1.0 - np.tanh(out) ** 2))
    # skip draws with a pre-activation close to a kink
    h, near = x, False
    for k, (W, b) in enumerate(p.unpack(theta)[:-1]):
        z = h @ W + b
        near |= bool(np.any(np.abs(z) < 1e-4))
        h = np.maximum(z, 0)
    if not near:
        assert rel_err(g, finite_difference_gradient(f, theta)) < 1e-5


def test_fd_examples():
    assert abs(finite_difference_gradient(lambda t: t[0] ** 2, np.array([3.0]), 1e-4)[0] - 6.0) < 1e-6
    assert np.all(finite_difference_gradient(lambda t: 2.0, np.ones(4)) == 0.0)
    assert abs(finite_difference_gradient(lambda t: np.sin(t[0]), np.array([0.0]))[0] - 1.0) < 1e-8
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda t: 0.0, np.ones(1), eps=0.0)
    with pytest.raises(FloatingPointError):
        finite_difference_gradient(lambda t: np.inf, np.ones(1))


def test_init():
    p = Parameterization(128, 1, (64,))
    a, b = init_params(p, 3), init_params(p, 3)
    assert np.array_equal(a, b)
    for (k, kind), sl in p.layout.items():
        if kind == "bias":
            assert np.all(a[sl] == 0)
    W0 = a[p.layout[(0, "weight")]]
    assert np.all(np.abs(W0) <= np.sqrt(6.0 / 192))


def test_homogeneous_last_layer(rng):
    p = Parameterization(4, 2, (3,))
    theta = rng.standard_normal(p.n_params)
    theta[p.layout[(1, "bias")]] = 0.0
    x = rng.standard_normal((6, 4))
    scaled = theta.copy()
    scaled[p.layout[(1, "weight")]] *= 2.5
    assert np.allclose(forward(p, scaled, x), 2.5 * forward(p, theta, x))


def test_dimension_errors(rng):
    p = Parameterization(3, 2)
    with pytest.raises(ValueError):
        forward(p, np.zeros(p.n_params), np.zeros(4))
    with pytest.raises(ValueError):
        forward(p, np.zeros(p.n_params + 1), np.zeros(3))
    with pytest.raises(ValueError):
        backward(p, np.zeros(p.n_params), np.zeros(3), np.zeros(3))
    with pytest.raises(FloatingPointError):
        forward(p, np.full(p.n_params, np.inf), np.ones(3))


def test_dropout_inverted_scaling():
    p = Parameterization(1, 1, (2000,))
    theta = np.zeros(p.n_params)
    theta[p.layout[(0, "bias")]] = 1.0
    theta[p.layout[(1, "weight")]] = 1.0 / 2000
    out = forward(p, theta, np.zeros(1), dropout=0.5, rng=np.random.default_rng(0))
    assert abs(out[0] - 1.0) < 0.1
    with pytest.raises(ValueError):
        forward(p, theta, np.zeros(1), dropout=0.5)


def test_save_load(tmp_path, rng):
    p = Parameterization(3, 2, (4,))
    theta = rng.standard_normal(p.n_params)
    save_params(theta, {"n_params": p.n_params}, tmp_path / "params")
    back, layout = load_params(tmp_path / "params")
    assert np.array_equal(back, theta) and layout["n_params"] == p.n_params
