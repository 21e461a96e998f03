"""Brute-force oracles for the curvature code.

Nothing here calls the backward recursions of :mod:`kfgn.curvature` or the
backpropagation in :mod:`kfgn.network`. The forward pass and the losses are
re-implemented locally so that they also accept complex inputs, which gives
exact Jacobian columns by complex-step differentiation.
"""
from __future__ import annotations

import numpy as np

from .errors import SizeError
from .linalg import psd_project
from .network import NetworkSpec, check_params, output_hessian, forward as _net_forward

DENSE_CAP = 4096
COMPLEX_STEP = 1e-30


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _act(t, h):
    if t.kind == "relu":
        return np.where(h.real > 0, h, 0.0)
    if t.kind == "leaky_relu":
        return np.where(h.real > 0, h, t.slope * h)
    if t.kind == "tanh":
        return np.tanh(h)
    if t.kind == "sigmoid":
        return _sigmoid(h)
    return h


def network_output(spec: NetworkSpec, params, X):
    a = X
    L = spec.n_layers
    for lam, W in enumerate(params, start=1):
        h = W[:, :-1] @ a + W[:, -1:]
        a = h if lam == L else _act(spec.transfer_of(lam), h)
    return a


def _losses(spec, hL, Y):
    if spec.loss == "squared":
        return 0.5 * np.sum((Y - hL) ** 2, axis=0)
    if spec.loss == "bernoulli_xent":
        return np.sum(np.logaddexp(0.0, hL) - Y * hL, axis=0)
    y = np.asarray(Y).reshape(-1)
    pi, q2, q3 = _sigmoid(hL[0]), _sigmoid(hL[1]), _sigmoid(hL[2])
    p1 = pi * q2 + (1 - pi) * q3
    return -np.log(np.where(y == 1, p1, 1.0 - p1))


def batch_loss(spec: NetworkSpec, params, X, Y) -> float:
    return float(np.mean(_losses(spec, network_output(spec, params, X), Y)))


def fd_gradient(spec: NetworkSpec, params, X, Y, step: float = 1e-5) -> list:
    """Central-difference gradient of the batch-mean loss, one array per layer."""
    params = [W.copy() for W in check_params(spec, params)]
    grads = []
    for W in params:
        g = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            w0 = W[idx]
            W[idx] = w0 + step
            fp = batch_loss(spec, params, X, Y)
            W[idx] = w0 - step
            fm = batch_loss(spec, params, X, Y)
            W[idx] = w0
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def fd_hessian_block(spec: NetworkSpec, params, X, Y, layer: int, step: float = 1e-4) -> np.ndarray:
    """Second central differences of the batch-mean loss w.r.t. column-major
    ``vec(W_layer)``."""
    params = [W.copy() for W in check_params(spec, params)]
    W = params[layer - 1]
    shape = W.shape
    P = W.size
    if P > DENSE_CAP:
        raise SizeError(f"layer has {P} parameters, above the dense cap {DENSE_CAP}")
    w0 = W.ravel(order="F").copy()

    def f(w):
        params[layer - 1] = w.reshape(shape, order="F")
        return batch_loss(spec, params, X, Y)

    Hm = np.zeros((P, P))
    e = np.eye(P) * step
    for i in range(P):
        for j in range(i, P):
            v = (
                f(w0 + e[i] + e[j])
                - f(w0 + e[i] - e[j])
                - f(w0 - e[i] + e[j])
                + f(w0 - e[i] - e[j])
            ) / (4 * step * step)
            Hm[i, j] = Hm[j, i] = v
    return Hm


def jacobian(spec: NetworkSpec, params, X) -> np.ndarray:
    """Per-sample output Jacobians ``(N, D_L, P)`` by complex-step directional
    passes, one parameter direction at a time."""
    params = check_params(spec, params)
    P = spec.n_params
    if P > DENSE_CAP:
        raise SizeError(f"{P} parameters exceed the dense cap {DENSE_CAP}")
    N = X.shape[1]
    J = np.zeros((N, spec.layer_sizes[-1], P))
    cparams = [W.astype(np.complex128) for W in params]
    col = 0
    for W in cparams:
        for c in range(W.shape[1]):
            for r in range(W.shape[0]):  # column-major order
                W[r, c] += 1j * COMPLEX_STEP
                J[:, :, col] = (network_output(spec, cparams, X).imag / COMPLEX_STEP).T
                W[r, c] -= 1j * COMPLEX_STEP
                col += 1
    return J


def _output_hessians(spec, params, X, Y, project=True):
    HL = output_hessian(spec, _net_forward(spec, params, X), Y)
    if project and spec.loss == "binary_mixture":
        HL = psd_project(HL)
    return HL


def brute_force_gn(spec: NetworkSpec, params, X, Y) -> np.ndarray:
    """Dense minibatch Gauss-Newton ``mean_n J_n^T H_L,n J_n``."""
    J = jacobian(spec, params, X)
    HL = _output_hessians(spec, params, X, Y)
    return np.einsum("nip,nij,njq->pq", J, HL, J) / J.shape[0]


def brute_force_gn_samples(spec: NetworkSpec, params, X, Y) -> np.ndarray:
    """Per-sample dense GN matrices ``(N, P, P)``."""
    J = jacobian(spec, params, X)
    HL = _output_hessians(spec, params, X, Y)
    return np.einsum("nip,nij,njq->npq", J, HL, J)


def numerical_rank(M, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(np.asarray(M), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def model_expected_output_hessian(spec: NetworkSpec, hL: np.ndarray) -> np.ndarray:
    """``E_{y ~ p(y|h)} [d^2 E / dh^2]`` per sample, i.e. the output Fisher."""
    from .network import ForwardCache

    cache = ForwardCache([None, hL], [np.zeros((1, hL.shape[1])), hL])
    N = hL.shape[1]
    if spec.loss == "binary_mixture":
        pi, q2, q3 = _sigmoid(hL[0]), _sigmoid(hL[1]), _sigmoid(hL[2])
        p1 = pi * q2 + (1 - pi) * q3
        H1 = output_hessian(spec, cache, np.ones((1, N)))
        H0 = output_hessian(spec, cache, np.zeros((1, N)))
        return p1[:, None, None] * H1 + (1 - p1)[:, None, None] * H0
    return output_hessian(spec, cache, np.zeros_like(hL))


def fisher_mc_check(spec: NetworkSpec, params, X, S: int, seed: int) -> dict:
    """Compare the Monte Carlo output factor against the analytic one.

    Returns the relative Frobenius error together with both matrices.
    """
    from .curvature import kfac_mc_backward

    cache = _net_forward(spec, params, X)
    blocks = kfac_mc_backward(spec, params, cache, np.random.default_rng(seed), S)
    estimate = blocks.G[-1]
    analytic = model_expected_output_hessian(spec, cache.output).mean(axis=0)
    err = np.linalg.norm(estimate - analytic) / np.linalg.norm(analytic)
    return {"rel_error": float(err), "estimate": estimate, "analytic": analytic, "S": S}
