import numpy as np
import pytest
from hypothesis import given, strategies as st

from kfgn.errors import ContractError, NumericBreakdownError, ParseError
from kfgn.network import (
    ForwardCache,
    NetworkSpec,
    Transfer,
    backward_gradients,
    flatten,
    forward,
    init_params,
    load_params,
    loss_value,
    objective,
    output_gradient,
    output_hessian,
    parse_transfer,
    save_params,
    transfer_derivs,
    unflatten,
)
from kfgn.verify import fd_gradient

from conftest import make_problem


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def mixture_nll(h, y):
    """Direct evaluation of the two-classifier mixture, no log tricks."""
    p1 = sig(h[0]) * sig(h[1]) + (1 - sig(h[0])) * sig(h[2])
    return -np.log(p1 if y == 1 else 1 - p1)


def output_cache(h):
    h = np.asarray(h, dtype=float).reshape(-1, 1)
    return ForwardCache([None, h], [np.zeros((1, 1)), h])


def fd_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def fd_hess(f, x, step=1e-4):
    n = x.size
    H = np.zeros((n, n))
    E = np.eye(n) * step
    for i in range(n):
        for j in range(n):
            H[i, j] = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * step**2)
    return H


# ------------------------------------------------------------------ spec


def test_spec_basic_properties():
    spec = NetworkSpec((5, 4, 3), "tanh", "squared")
    assert spec.n_layers == 2
    assert spec.weight_shapes == [(4, 6), (3, 5)]
    assert spec.n_params == 24 + 15
    assert spec.transfer_of(2).kind == "linear"


def test_spec_mixture_needs_three_outputs():
    with pytest.raises(ContractError):
        NetworkSpec((4, 2), (), "binary_mixture")
    NetworkSpec((4, 3), (), "binary_mixture")


@pytest.mark.parametrize("sizes", [(3,), (3, 0, 2), ()])
def test_spec_rejects_bad_sizes(sizes):
    with pytest.raises(ContractError):
        NetworkSpec(sizes)


def test_spec_transfer_list_length():
    with pytest.raises(ContractError):
        NetworkSpec((2, 3, 3, 1), ("relu", "tanh", "relu"))
    spec = NetworkSpec((2, 3, 3, 1), ("relu", "tanh"))
    assert [t.kind for t in spec.transfer] == ["relu", "tanh"]


def test_parse_leaky_slope():
    assert parse_transfer("leaky_relu(0.2)") == Transfer("leaky_relu", 0.2)
    assert parse_transfer("leaky_relu").slope == 0.1
    with pytest.raises(ContractError):
        parse_transfer("swish")


# --------------------------------------------------------------- forward


def test_forward_identity_linear():
    spec = NetworkSpec((1, 1), (), "squared")
    cache = forward(spec, [np.array([[1.0, 0.0]])], np.array([[2.0]]))
    assert cache.H[1][0, 0] == 2.0 and cache.A[1][0, 0] == 2.0


def test_forward_relu_negative():
    spec = NetworkSpec((1, 1, 1), "relu")
    cache = forward(spec, [np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])], np.array([[-1.0]]))
    assert cache.A[1][0, 0] == 0.0


def test_forward_leaky_negative():
    spec = NetworkSpec((1, 1, 1), "leaky_relu(0.1)")
    cache = forward(spec, [np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])], np.array([[-2.0]]))
    assert cache.A[1][0, 0] == pytest.approx(-0.2)


def test_forward_shape_mismatch():
    spec, params, X, _ = make_problem((5, 4, 3))
    with pytest.raises(ContractError):
        forward(spec, params, X[:4])
    with pytest.raises(ContractError):
        forward(spec, params[:1], X)


def test_forward_deterministic():
    spec, params, X, _ = make_problem((5, 4, 3), N=7)
    a, b = forward(spec, params, X), forward(spec, params, X)
    for x, y in zip(a.A, b.A):
        assert np.array_equal(x, y)


def test_forward_cache_invariants():
    spec, params, X, _ = make_problem((5, 4, 3), "sigmoid", N=6)
    cache = forward(spec, params, X)
    assert cache.A[0] is not None and cache.A[0].shape == (5, 6)
    np.testing.assert_allclose(cache.A[1], sig(cache.H[1]))
    np.testing.assert_array_equal(cache.A[2], cache.H[2])


# ----------------------------------------------------------------- losses


def test_squared_loss_zero_at_target():
    spec = NetworkSpec((2, 2), (), "squared")
    cache = output_cache([0.3, -1.2])
    assert loss_value(spec, cache, np.array([[0.3], [-1.2]])) == 0.0


def test_xent_at_zero_is_log2_per_unit():
    spec = NetworkSpec((2, 3), (), "bernoulli_xent")
    cache = output_cache([0.0, 0.0, 0.0])
    assert loss_value(spec, cache, np.ones((3, 1))) == pytest.approx(3 * np.log(2))


def test_mixture_saturation():
    spec = NetworkSpec((2, 3), (), "binary_mixture")
    cache = output_cache([30.0, 30.0, -30.0])
    assert loss_value(spec, cache, np.array([[1.0]])) < 1e-12


def test_mixture_rejects_non_binary_labels():
    spec = NetworkSpec((2, 3), (), "binary_mixture")
    with pytest.raises(ContractError):
        loss_value(spec, output_cache([0.0, 0.0, 0.0]), np.array([[0.5]]))


def test_non_finite_loss_names_sample():
    spec = NetworkSpec((1, 1), (), "squared")
    h = np.array([[1.0, 1e200, 0.0]])
    cache = ForwardCache([None, h], [np.zeros((1, 3)), h])
    with pytest.raises(NumericBreakdownError, match="sample 1"):
        loss_value(spec, cache, np.zeros((1, 3)))


def test_loss_is_batch_mean():
    spec = NetworkSpec((1, 2), (), "squared")
    h = np.array([[1.0, 0.0], [0.0, 2.0]])
    cache = ForwardCache([None, h], [np.zeros((1, 2)), h])
    # per-sample 0.5 and 2.0
    assert loss_value(spec, cache, np.zeros((2, 2))) == pytest.approx(1.25)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=2), st.lists(st.floats(0, 1), min_size=2, max_size=2))
def test_losses_non_negative(h, y):
    for loss in ("squared", "bernoulli_xent"):
        spec = NetworkSpec((1, 2), (), loss)
        assert loss_value(spec, output_cache(h), np.array(y).reshape(2, 1)) >= 0.0


# ------------------------------------------------------- output derivatives


def test_squared_output_gradient():
    spec = NetworkSpec((1, 2), (), "squared")
    d = output_gradient(spec, output_cache([1.0, 2.0]), np.array([[0.5], [3.0]]))
    np.testing.assert_allclose(d[:, 0], [0.5, -1.0])


def test_xent_output_gradient_matches_fd():
    spec = NetworkSpec((1, 2), (), "bernoulli_xent")
    h, y = np.array([0.7, -1.3]), np.array([[1.0], [0.2]])
    d = output_gradient(spec, output_cache(h), y)[:, 0]
    np.testing.assert_allclose(d, sig(h) - y[:, 0])
    f = lambda x: np.sum(np.log1p(np.exp(x)) - y[:, 0] * x)
    np.testing.assert_allclose(d, fd_grad(f, h), atol=1e-8)


@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3), st.integers(0, 1))
def test_mixture_gradient_matches_fd(h, y):
    spec = NetworkSpec((1, 3), (), "binary_mixture")
    h = np.array(h)
    d = output_gradient(spec, output_cache(h), np.array([[float(y)]]))[:, 0]
    np.testing.assert_allclose(d, fd_grad(lambda x: mixture_nll(x, y), h), atol=1e-7)


def test_squared_output_hessian_identity():
    spec = NetworkSpec((1, 3), (), "squared")
    H = output_hessian(spec, output_cache([1.0, 2.0, 3.0]), np.zeros((3, 1)))
    np.testing.assert_array_equal(H[0], np.eye(3))


def test_xent_output_hessian_at_zero():
    spec = NetworkSpec((1, 2), (), "bernoulli_xent")
    H = output_hessian(spec, output_cache([0.0, 0.0]), np.zeros((2, 1)))
    np.testing.assert_allclose(H[0], 0.25 * np.eye(2))


@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3), st.integers(0, 1))
def test_mixture_hessian_matches_fd(h, y):
    spec = NetworkSpec((1, 3), (), "binary_mixture")
    h = np.array(h)
    H = output_hessian(spec, output_cache(h), np.array([[float(y)]]))[0]
    np.testing.assert_allclose(H, fd_hess(lambda x: mixture_nll(x, y), h), atol=1e-6)


def test_mixture_hessian_can_be_indefinite():
    spec = NetworkSpec((1, 3), (), "binary_mixture")
    rng = np.random.default_rng(0)
    hs = rng.uniform(-4, 4, size=(3, 200))
    cache = ForwardCache([None, hs], [np.zeros((1, 200)), hs])
    H = output_hessian(spec, cache, rng.integers(0, 2, size=(1, 200)))
    assert np.linalg.eigvalsh(H).min() < -1e-6


# --------------------------------------------------------------- transfers


def test_transfer_derivs_examples():
    assert transfer_derivs("relu", np.array(3.0)) == (1.0, 0.0)
    assert transfer_derivs("tanh", np.array(0.0)) == (1.0, 0.0)
    d1, d2 = transfer_derivs("sigmoid", np.array(0.0))
    assert (d1, d2) == (0.25, 0.0)


def test_transfer_kink_conventions():
    assert transfer_derivs("relu", np.array(0.0))[0] == 0.0
    assert transfer_derivs("leaky_relu(0.3)", np.array(0.0))[0] == pytest.approx(0.3)


@pytest.mark.parametrize("kind", ["tanh", "sigmoid"])
def test_transfer_derivs_match_fd(kind):
    h = np.linspace(-3, 3, 13)
    t = parse_transfer(kind)
    from kfgn.network import transfer

    d1, d2 = transfer_derivs(t, h)
    eps = 1e-5
    np.testing.assert_allclose(d1, (transfer(t, h + eps) - transfer(t, h - eps)) / (2 * eps), atol=1e-9)
    g = lambda x: transfer_derivs(t, x)[0]
    np.testing.assert_allclose(d2, (g(h + eps) - g(h - eps)) / (2 * eps), atol=1e-8)


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "linear"])
def test_piecewise_linear_second_derivative_zero(kind):
    assert np.all(transfer_derivs(kind, np.linspace(-2, 2, 9))[1] == 0)


# ---------------------------------------------------------------- gradients


def test_zero_output_gradient_gives_zero_weight_gradient():
    spec, params, X, _ = make_problem((5, 4, 3), "tanh", "squared")
    cache = forward(spec, params, X)
    grads = backward_gradients(spec, params, cache, cache.output)
    assert all(np.all(g == 0) for g in grads)


def test_one_layer_closed_form(rng):
    spec = NetworkSpec((3, 2), (), "squared")
    W = rng.standard_normal((2, 4))
    X, Y = rng.standard_normal((3, 5)), rng.standard_normal((2, 5))
    h = W[:, :3] @ X + W[:, 3:]
    Xb = np.vstack([X, np.ones((1, 5))])
    expect = (h - Y) @ Xb.T / 5
    (g,) = backward_gradients(spec, [W], forward(spec, [W], X), Y)
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_weight_decay_adds_eta_w():
    spec, params, X, Y = make_problem((5, 4, 3))
    cache = forward(spec, params, X)
    g0 = backward_gradients(spec, params, cache, Y)
    g1 = backward_gradients(spec, params, cache, Y, eta=0.3)
    for a, b, W in zip(g0, g1, params):
        np.testing.assert_allclose(b - a, 0.3 * W, atol=1e-14)


COMBOS = [
    (t, loss)
    for t in ("tanh", "sigmoid", "relu", "leaky_relu", "linear")
    for loss in ("squared", "bernoulli_xent", "binary_mixture")
]


@pytest.mark.parametrize("transfer_kind,loss", COMBOS)
def test_gradients_match_fd(transfer_kind, loss):
    sizes = (5, 4, 3)
    spec, params, X, Y = make_problem(sizes, transfer_kind, loss, N=3, seed=7)
    grads = backward_gradients(spec, params, forward(spec, params, X), Y)
    fd = fd_gradient(spec, params, X, Y)
    err = np.linalg.norm(flatten(grads) - flatten(fd)) / max(np.linalg.norm(flatten(fd)), 1e-12)
    assert err < 1e-5


def test_objective_includes_l2():
    spec, params, X, Y = make_problem((5, 4, 3))
    base = objective(spec, params, X, Y)
    sq = sum(np.sum(W * W) for W in params)
    assert objective(spec, params, X, Y, eta=0.2) == pytest.approx(base + 0.1 * sq)


# ----------------------------------------------------- parameter container


def test_flatten_roundtrip():
    spec, params, _, _ = make_problem((5, 4, 3))
    back = unflatten(spec, flatten(params))
    for a, b in zip(params, back):
        np.testing.assert_array_equal(a, b)


def test_flatten_is_column_major():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(flatten([W]), [1, 3, 2, 4])


def test_param_file_roundtrip(tmp_path):
    spec, params, _, _ = make_problem((5, 4, 3))
    p = tmp_path / "w.knw"
    save_params(p, params)
    raw = p.read_bytes()
    assert raw[:4] == b"KNW1"
    assert np.frombuffer(raw[4:20], dtype="<u4").tolist() == [2, 5, 4, 3]
    back = load_params(p)
    for a, b in zip(params, back):
        np.testing.assert_array_equal(a, b)


def test_param_file_errors(tmp_path):
    spec, params, _, _ = make_problem((5, 4, 3))
    p = tmp_path / "w.knw"
    save_params(p, params)
    raw = p.read_bytes()
    bad = tmp_path / "bad.knw"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError, match="offset 0"):
        load_params(bad)
    bad.write_bytes(raw[:-8])
    with pytest.raises(ParseError, match="truncated"):
        load_params(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(ParseError, match="trailing"):
        load_params(bad)


def test_init_params_shapes_and_zero_bias(rng):
    spec = NetworkSpec((6, 5, 2))
    params = init_params(spec, rng)
    assert [W.shape for W in params] == spec.weight_shapes
    assert all(np.all(W[:, -1] == 0) for W in params)
