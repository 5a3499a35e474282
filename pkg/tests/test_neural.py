import numpy as np
import pytest

from vflbayes.mathcore import RngStream, ShapeError
from vflbayes.neural import MlpParams, MlpSpec, TapeError, mlp_backward, mlp_forward, mlp_init


def _straight_line(params, X):
    """Layer-by-layer evaluation written without the library helpers."""
    h = X
    L = len(params.spec.widths) - 1
    off = 0
    for l in range(L):
        a, b = params.spec.widths[l], params.spec.widths[l + 1]
        W = params.flat[off : off + a * b].reshape(a, b)
        off += a * b
        bias = params.flat[off : off + b]
        off += b
        z = np.einsum("ni,ij->nj", h, W) + bias
        act = params.spec.output_activation if l == L - 1 else params.spec.activation
        h = {"tanh": np.tanh(z), "relu": np.where(z > 0, z, 0.0), "linear": z}[act]
    return h


def random_config(rng):
    depth = rng.integers(1, 3)
    widths = [int(rng.integers(1, 5))] + [int(rng.integers(1, 9)) for _ in range(depth)] + [int(rng.integers(1, 3))]
    act = str(rng.choice(["tanh", "relu"]))
    out_act = str(rng.choice(["linear", act]))
    spec = MlpSpec(tuple(widths), act, out_act)
    params = MlpParams(spec, rng.normal(size=spec.n_params))
    X = rng.normal(size=(int(rng.integers(1, 17)), widths[0]))
    G = rng.normal(size=(X.shape[0], widths[-1]))
    return params, X, G


def fd_check(params, X, G, h=1e-6):
    """Max relative error of backward vs central differences of <G, f(X)>."""
    out, tape = mlp_forward(params, X)
    gp, gx = mlp_backward(params, tape, G)

    def obj(flat, inputs):
        return float(np.sum(G * _straight_line(MlpParams(params.spec, flat), inputs)))

    fd_p = np.empty_like(params.flat)
    for i in range(params.flat.size):
        e = np.zeros_like(params.flat)
        e[i] = h
        fd_p[i] = (obj(params.flat + e, X) - obj(params.flat - e, X)) / (2 * h)
    fd_x = np.empty_like(X)
    for idx in np.ndindex(X.shape):
        e = np.zeros_like(X)
        e[idx] = h
        fd_x[idx] = (obj(params.flat, X + e) - obj(params.flat, X - e)) / (2 * h)
    num = np.concatenate([gp, gx.ravel()])
    ref = np.concatenate([fd_p, fd_x.ravel()])
    return np.max(np.abs(num - ref)) / max(np.max(np.abs(ref)), 1e-8)


def test_param_count():
    assert MlpSpec((1, 16, 2)).n_params == 66


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), activation="sigmoid")


def test_init_deterministic_and_scaled():
    spec = MlpSpec((100, 100, 2))
    a = mlp_init(spec, RngStream(4, 9))
    b = mlp_init(spec, RngStream(4, 9))
    np.testing.assert_array_equal(a.flat, b.flat)
    assert np.all(a.biases[0] == 0) and np.all(a.biases[1] == 0)
    w = a.weights[0].ravel()
    assert w.size == 10**4
    assert abs(w.std() / (1 / np.sqrt(100)) - 1) < 0.2


def test_flatten_round_trip():
    rng = np.random.default_rng(0)
    spec = MlpSpec((3, 5, 2), "relu")
    p = MlpParams(spec, rng.normal(size=spec.n_params))
    q = MlpParams.from_bytes(p.to_bytes())
    assert q.spec == spec
    np.testing.assert_array_equal(q.flat, p.flat)
    rebuilt = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(p.weights, p.biases)])
    np.testing.assert_array_equal(rebuilt, p.flat)


def test_zero_params_give_zero_output():
    X = np.random.default_rng(1).normal(size=(7, 3))
    out, _ = mlp_forward(MlpParams(MlpSpec((3, 4, 2))), X)
    np.testing.assert_array_equal(out, 0.0)


def test_identity_layer():
    p = MlpParams(MlpSpec((3, 3)))
    p.weights[0][...] = np.eye(3)
    X = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_array_equal(mlp_forward(p, X)[0], X)


def test_forward_matches_straight_line():
    rng = np.random.default_rng(3)
    for _ in range(20):
        params, X, _ = random_config(rng)
        np.testing.assert_allclose(mlp_forward(params, X)[0], _straight_line(params, X), rtol=1e-13, atol=1e-13)


def test_forward_batch_decomposable():
    rng = np.random.default_rng(4)
    params, X, _ = random_config(rng)
    full = mlp_forward(params, X)[0]
    for i in range(X.shape[0]):
        np.testing.assert_allclose(mlp_forward(params, X[i : i + 1])[0][0], full[i], rtol=1e-14, atol=1e-15)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        mlp_forward(MlpParams(MlpSpec((3, 2))), np.zeros((4, 2)))


def test_backward_zero_upstream():
    rng = np.random.default_rng(5)
    params, X, G = random_config(rng)
    _, tape = mlp_forward(params, X)
    gp, gx = mlp_backward(params, tape, np.zeros_like(G))
    assert np.all(gp == 0) and np.all(gx == 0)


def test_backward_single_linear_layer():
    rng = np.random.default_rng(6)
    p = MlpParams(MlpSpec((3, 2)), rng.normal(size=8))
    X, G = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    _, tape = mlp_forward(p, X)
    gp, gx = mlp_backward(p, tape, G)
    grads = MlpParams(p.spec, gp)
    np.testing.assert_allclose(grads.weights[0], X.T @ G)
    np.testing.assert_allclose(grads.biases[0], G.sum(axis=0))
    np.testing.assert_allclose(gx, G @ p.weights[0].T)


def test_backward_rejects_foreign_tape():
    rng = np.random.default_rng(7)
    params, X, G = random_config(rng)
    _, tape = mlp_forward(params, X)
    with pytest.raises(TapeError):
        mlp_backward(params.copy(), tape, G)
    with pytest.raises(ShapeError):
        mlp_backward(params, tape, np.zeros((G.shape[0], G.shape[1] + 1)))


def test_gradient_check_twenty_architectures():
    rng = np.random.default_rng(8)
    errs = [fd_check(*random_config(rng)) for _ in range(20)]
    assert max(errs) < 1e-5
