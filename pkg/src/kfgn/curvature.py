"""Curvature backends for layerwise Kronecker-factored Gauss-Newton.

Every backend returns, per layer, an activation factor ``Q`` of size
``(D_{lam-1}+1)^2`` and a pre-activation factor ``G`` of size ``D_lam^2`` whose
Kronecker product ``Q kron G`` approximates the layer's block of the expected
Gauss-Newton matrix. Inside every backward recursion the bias column is
stripped from ``W`` since the bias does not feed the next pre-activation.

This module is stateless; moving averages live in :mod:`kfgn.optimizer`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, SizeError
from .linalg import psd_project, psd_sqrt_factors
from .network import (
    ForwardCache,
    NetworkSpec,
    backprop,
    flatten,
    loss_gradient,
    output_gradient,
    output_hessian,
    transfer_derivs,
    unflatten,
    weight_gradients,
    with_bias,
)

log = logging.getLogger(__name__)

METHODS = ("exact_hessian", "exact_gn", "kfra", "kflr", "kfac_mc")
DENSE_CAP = 4096
PSD_WARN_TOL = 1e-12


@dataclass
class CurvatureBlocks:
    method: str
    Q: list
    G: list
    batch_size: int
    sample_count: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown curvature method {self.method!r}")
        if len(self.Q) != len(self.G):
            raise ContractError("Q and G must have one factor per layer")

    @property
    def n_layers(self) -> int:
        return len(self.Q)

    def dense_block(self, lam: int) -> np.ndarray:
        """Materialise ``Q kron G`` for layer ``lam`` (1-based)."""
        Q, G = self.Q[lam - 1], self.G[lam - 1]
        n = Q.shape[0] * G.shape[0]
        if n > DENSE_CAP:
            raise SizeError(f"dense block of size {n} exceeds cap {DENSE_CAP}")
        return np.kron(Q, G)


def activation_factors(cache: ForwardCache) -> list:
    """``(1/N) [A;1][A;1]^T`` for each layer's input."""
    N = cache.n_samples
    out = []
    for A in cache.A[:-1]:
        Ab = with_bias(A)
        out.append(Ab @ Ab.T / N)
    return out


def output_curvature(spec: NetworkSpec, cache: ForwardCache, Y) -> np.ndarray:
    """Per-sample output Hessians ``(N, D_L, D_L)``, projected onto the PSD cone
    when the loss can produce indefinite ones."""
    HL = output_hessian(spec, cache, Y)
    if spec.loss == "binary_mixture":
        HL = psd_project(HL)
    return HL


def _bprime(spec, cache, lam):
    return transfer_derivs(spec.transfer_of(lam), cache.H[lam])[0]


# ------------------------------------------------------------ per-sample exact


def preact_hessian_per_sample(spec: NetworkSpec, params, cache: ForwardCache, Y, n: int) -> list:
    """Exact pre-activation Hessians of sample ``n``, one ``D_lam x D_lam`` per layer.

    ``H_lam = B W^T H_{lam+1} W B + diag(f''(h_lam) * dE/da_lam)`` started from
    the (unprojected) output Hessian.
    """
    one = cache.sample(n)
    Y = np.asarray(Y, dtype=np.float64)
    y = Y.reshape(1, -1)[:, n : n + 1] if spec.loss == "binary_mixture" else Y[:, n : n + 1]
    L = spec.n_layers
    d = backprop(spec, params, one, output_gradient(spec, one, y))
    Hs = [None] * L
    Hs[L - 1] = output_hessian(spec, one, y)[0]
    for lam in range(L - 1, 0, -1):
        W = params[lam][:, :-1]
        fp, fpp = transfer_derivs(spec.transfer_of(lam), one.H[lam][:, 0])
        dEda = W.T @ d[lam + 1][:, 0]
        M = W.T @ Hs[lam] @ W
        Hs[lam - 1] = fp[:, None] * M * fp[None, :] + np.diag(fpp * dEda)
    return Hs


def hessian_block(cache: ForwardCache, H_lam: np.ndarray, n: int, lam: int, cap: int = DENSE_CAP):
    """Dense ``([a;1][a;1]^T) kron H_lam`` for sample ``n`` of layer ``lam``."""
    a = with_bias(cache.A[lam - 1][:, n : n + 1])[:, 0]
    size = a.size * H_lam.shape[0]
    if size > cap:
        raise SizeError(f"Hessian block of size {size} exceeds dense cap {cap}")
    return np.kron(np.outer(a, a), H_lam)


def exact_gn_per_sample(spec: NetworkSpec, params, cache: ForwardCache, Y, n: int) -> list:
    """Pre-activation GN matrices of sample ``n`` via ``G_lam = B W^T G_{lam+1} W B``."""
    one = cache.sample(n)
    Y = np.asarray(Y, dtype=np.float64)
    y = Y.reshape(1, -1)[:, n : n + 1] if spec.loss == "binary_mixture" else Y[:, n : n + 1]
    L = spec.n_layers
    Gs = [None] * L
    Gs[L - 1] = output_curvature(spec, one, y)[0]
    for lam in range(L - 1, 0, -1):
        W = params[lam][:, :-1]
        fp = _bprime(spec, one, lam)[:, 0]
        Gs[lam - 1] = fp[:, None] * (W.T @ Gs[lam] @ W) * fp[None, :]
    return Gs


# ------------------------------------------------------------- batch backends


def kfra_backward(spec: NetworkSpec, params, cache: ForwardCache, HL_mean) -> CurvatureBlocks:
    """Pass the batch-expected pre-activation GN matrix backwards:
    ``G_{lam-1} = (W^T G_lam W) * ((1/N) A' A'^T)`` with ``A' = f'(H_{lam-1})``."""
    N = cache.n_samples
    L = spec.n_layers
    G = [None] * L
    G[L - 1] = np.asarray(HL_mean, dtype=np.float64)
    for lam in range(L, 1, -1):
        W = params[lam - 1][:, :-1]
        Ap = _bprime(spec, cache, lam - 1)
        G[lam - 2] = (W.T @ G[lam - 1] @ W) * (Ap @ Ap.T / N)
    return CurvatureBlocks("kfra", activation_factors(cache), G, N)


def output_roots(HL: np.ndarray) -> np.ndarray:
    """Square-root factors ``(N, D_L, K)`` of per-sample output Hessians.

    Diagonal Hessians get ``K = D_L`` axis-aligned roots without an
    eigendecomposition; anything else is eigendecomposed with negative
    eigenvalues clamped.
    """
    HL = np.asarray(HL, dtype=np.float64)
    D = HL.shape[-1]
    idx = np.arange(D)
    diag = HL[:, idx, idx]
    off = HL.copy()
    off[:, idx, idx] = 0.0
    if not np.any(off):
        if np.any(diag < -PSD_WARN_TOL):
            log.warning("output Hessian has negative diagonal entries; clamping to zero")
        roots = np.zeros_like(HL)
        roots[:, idx, idx] = np.sqrt(np.clip(diag, 0.0, None))
        return roots
    e = np.linalg.eigvalsh(0.5 * (HL + np.swapaxes(HL, 1, 2)))
    if e.min() < -PSD_WARN_TOL * max(1.0, np.abs(e).max()):
        log.warning("output Hessian is not PSD (min eigenvalue %.3g); projecting", e.min())
    return psd_sqrt_factors(HL)


def kflr_backward(spec: NetworkSpec, params, cache: ForwardCache, HL) -> CurvatureBlocks:
    """Exact expected pre-activation GN from per-sample root factors.

    ``HL`` is the per-sample output Hessian stack ``(N, D_L, D_L)``; its roots
    ``C_L^k`` are propagated with ``C_lam = B W^T C_{lam+1}`` and
    ``G_lam = (1/N) sum_k C_lam^k C_lam^k^T`` over all stacked columns.
    """
    N = cache.n_samples
    L = spec.n_layers
    roots = output_roots(HL)  # (N, D_L, K)
    C = np.transpose(roots, (1, 0, 2))  # (D, N, K)
    G = [None] * L
    for lam in range(L, 0, -1):
        flat = C.reshape(C.shape[0], -1)
        G[lam - 1] = flat @ flat.T / N
        if lam > 1:
            W = params[lam - 1][:, :-1]
            fp = _bprime(spec, cache, lam - 1)
            C = np.einsum("ij,jnk->ink", W.T, C) * fp[:, :, None]
    return CurvatureBlocks("kflr", activation_factors(cache), G, N)


def sample_model_targets(spec: NetworkSpec, hL: np.ndarray, rng: np.random.Generator, S: int):
    """Draw ``S`` targets per datapoint from the model's predictive distribution.

    Returns an array with ``N * S`` columns, datapoint index fastest.
    """
    h = np.tile(hL, S)
    if spec.loss == "squared":
        return h + rng.standard_normal(h.shape)
    if spec.loss == "bernoulli_xent":
        return (rng.random(h.shape) < 1.0 / (1.0 + np.exp(-h))).astype(np.float64)
    pi = 1.0 / (1.0 + np.exp(-h[0]))
    p1 = pi / (1.0 + np.exp(-h[1])) + (1.0 - pi) / (1.0 + np.exp(-h[2]))
    return (rng.random(h.shape[1]) < p1).astype(np.float64)[None, :]


def kfac_mc_backward(
    spec: NetworkSpec, params, cache: ForwardCache, rng: np.random.Generator, S: int = 1
) -> CurvatureBlocks:
    """Monte Carlo Fisher factor: backpropagate ``grad_h (-log p(y_hat|x))`` for
    ``y_hat`` drawn from the model and average the outer products.

    The activation factor still comes from the data pass.
    """
    if not isinstance(rng, np.random.Generator):
        raise ContractError("kfac_mc_backward needs an explicitly seeded numpy Generator")
    if S < 1:
        raise ContractError("S must be at least 1")
    N = cache.n_samples
    y_hat = sample_model_targets(spec, cache.output, rng, S)
    d_hat = loss_gradient(spec, np.tile(cache.output, S), y_hat)
    d = backprop(spec, params, cache, d_hat)
    G = [dl @ dl.T / (N * S) for dl in d[1:]]
    return CurvatureBlocks("kfac_mc", activation_factors(cache), G, N, S)


def compute_blocks(
    method: str,
    spec: NetworkSpec,
    params,
    cache: ForwardCache,
    Y,
    rng: Optional[np.random.Generator] = None,
    S: int = 1,
    HL: Optional[np.ndarray] = None,
) -> CurvatureBlocks:
    """Dispatch to one of the Kronecker backends (``kfra``, ``kflr``, ``kfac_mc``)."""
    if method == "kfac_mc":
        return kfac_mc_backward(spec, params, cache, rng, S)
    if HL is None:
        HL = output_curvature(spec, cache, Y)
    if method == "kfra":
        return kfra_backward(spec, params, cache, HL.mean(axis=0))
    if method == "kflr":
        return kflr_backward(spec, params, cache, HL)
    raise ContractError(f"no Kronecker backend for method {method!r}")


# --------------------------------------------------------- GN-vector products


class GNOperator:
    """Matrix-free products with the minibatch Gauss-Newton matrix.

    ``J v`` is obtained by forward-mode propagation of the direction through
    the network, multiplied by the per-sample output Hessian and pulled back
    with an ordinary backward pass. No damping is added.
    """

    def __init__(self, spec: NetworkSpec, params, cache: ForwardCache, Y=None, HL=None):
        self.spec = spec
        self.params = params
        self.cache = cache
        self.HL = output_curvature(spec, cache, Y) if HL is None else HL
        L = spec.n_layers
        self._fp = [None] + [_bprime(spec, cache, lam) for lam in range(1, L)]
        self._abar = [with_bias(a) for a in cache.A[:-1]]

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def _forward_dir(self, V: list, start: int = 1) -> np.ndarray:
        """``J v`` restricted to directions in layers ``start..L``."""
        L = self.spec.n_layers
        Rh = V[start - 1] @ self._abar[start - 1]
        for lam in range(start + 1, L + 1):
            Ra = self._fp[lam - 1] * Rh
            Rh = V[lam - 1] @ self._abar[lam - 1] + self.params[lam - 1][:, :-1] @ Ra
        return Rh

    def _apply_HL(self, JV):
        return np.einsum("nij,jn->in", self.HL, JV)

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ContractError(f"direction has shape {v.shape}, expected ({self.n_params},)")
        return v

    def matvec(self, v) -> np.ndarray:
        V = unflatten(self.spec, self._check(v))
        U = self._apply_HL(self._forward_dir(V))
        d = backprop(self.spec, self.params, self.cache, U)
        return flatten(weight_gradients(self.cache, d))

    __call__ = matvec

    def quad(self, v) -> float:
        """``v^T G v`` from a single forward-mode pass."""
        JV = self._forward_dir(unflatten(self.spec, self._check(v)))
        return float(np.einsum("in,nij,jn->", JV, self.HL, JV) / self.cache.n_samples)

    def block_matvec(self, lam: int, v_lam) -> np.ndarray:
        """Product with the layer-``lam`` diagonal block, flattened column-major."""
        shape = self.spec.weight_shapes[lam - 1]
        v_lam = np.asarray(v_lam, dtype=np.float64)
        if v_lam.size != shape[0] * shape[1]:
            raise ContractError(f"layer {lam} direction must have {shape[0] * shape[1]} entries")
        V = [None] * self.spec.n_layers
        for i, s in enumerate(self.spec.weight_shapes):
            V[i] = np.zeros(s)
        V[lam - 1] = v_lam.reshape(shape, order="F")
        U = self._apply_HL(self._forward_dir(V, start=lam))
        # pull back only as far as layer lam
        L = self.spec.n_layers
        d = U
        for mu in range(L, lam, -1):
            d = (self.params[mu - 1][:, :-1].T @ d) * self._fp[mu - 1]
        g = d @ self._abar[lam - 1].T / self.cache.n_samples
        return g.ravel(order="F")


def gn_vector_product(spec: NetworkSpec, params, cache: ForwardCache, Y, v) -> np.ndarray:
    return GNOperator(spec, params, cache, Y).matvec(v)


def block_gn_vector_product(spec: NetworkSpec, params, cache: ForwardCache, Y, lam: int, v_lam):
    return GNOperator(spec, params, cache, Y).block_matvec(lam, v_lam)
