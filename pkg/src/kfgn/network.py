"""Feedforward networks: forward pass, losses and gradient backpropagation.

Conventions used throughout the package:

* data are stored column-wise, ``X`` has shape ``(D0, N)``;
* layer ``lam`` (1-based) has weights ``W[lam-1]`` of shape
  ``(D_lam, D_{lam-1} + 1)`` whose last column is the bias;
* transfer functions act on hidden layers only, the network output is the
  pre-activation ``h_L`` on which the loss is defined;
* a flat parameter vector concatenates ``vec(W_lam)`` in column-major order.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import ContractError, NumericBreakdownError, ParseError

TRANSFER_KINDS = ("relu", "leaky_relu", "tanh", "sigmoid", "linear")
LOSS_KINDS = ("squared", "bernoulli_xent", "binary_mixture")
PIECEWISE_LINEAR = ("relu", "leaky_relu", "linear")
PARAM_MAGIC = b"KNW1"


@dataclass(frozen=True)
class Transfer:
    kind: str
    slope: float = 0.1

    def __post_init__(self):
        if self.kind not in TRANSFER_KINDS:
            raise ContractError(f"unknown transfer {self.kind!r}")

    @property
    def piecewise_linear(self) -> bool:
        return self.kind in PIECEWISE_LINEAR

    def __str__(self):
        return f"leaky_relu({self.slope:g})" if self.kind == "leaky_relu" else self.kind


_LEAKY = re.compile(r"^leaky_relu(?:\(([^)]*)\))?$")


def parse_transfer(t) -> Transfer:
    if isinstance(t, Transfer):
        return t
    m = _LEAKY.match(str(t).strip())
    if m:
        return Transfer("leaky_relu", float(m.group(1)) if m.group(1) else 0.1)
    return Transfer(str(t).strip())


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes ``[D0, ..., DL]``, hidden transfer functions and output loss.

    ``transfer`` may be a single kind applied to every hidden layer or one
    kind per hidden layer (``L - 1`` entries).
    """

    layer_sizes: tuple
    transfer: tuple = field(default=("relu",))
    loss: str = "squared"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"need at least one layer of positive sizes, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)
        tr = self.transfer
        if isinstance(tr, (str, Transfer)):
            tr = (tr,)
        tr = tuple(parse_transfer(t) for t in tr)
        n_hidden = len(sizes) - 2
        if len(tr) == 1:
            tr = tr * n_hidden
        elif len(tr) != n_hidden:
            raise ContractError(f"expected 1 or {n_hidden} transfer kinds, got {len(tr)}")
        object.__setattr__(self, "transfer", tr)
        if self.loss not in LOSS_KINDS:
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.loss == "binary_mixture" and sizes[-1] != 3:
            raise ContractError("binary_mixture needs exactly 3 outputs")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def weight_shapes(self):
        s = self.layer_sizes
        return [(s[i + 1], s[i] + 1) for i in range(self.n_layers)]

    @property
    def n_params(self) -> int:
        return sum(r * c for r, c in self.weight_shapes)

    def transfer_of(self, lam: int) -> Transfer:
        """Transfer of layer ``lam``; the output layer is linear."""
        if lam == self.n_layers:
            return Transfer("linear")
        return self.transfer[lam - 1]

    @property
    def piecewise_linear(self) -> bool:
        return all(t.piecewise_linear for t in self.transfer)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "transfer": [str(t) for t in self.transfer],
            "loss": self.loss,
        }


@dataclass
class ForwardCache:
    """Pre-activations ``H[lam]`` and activations ``A[lam]``; ``H[0]`` is None
    and ``A[0]`` is the input batch."""

    H: list
    A: list

    @property
    def n_samples(self) -> int:
        return self.A[0].shape[1]

    @property
    def output(self) -> np.ndarray:
        return self.H[-1]

    def sample(self, n: int) -> "ForwardCache":
        return ForwardCache(
            [None] + [h[:, n : n + 1] for h in self.H[1:]],
            [a[:, n : n + 1] for a in self.A],
        )


def with_bias(A: np.ndarray) -> np.ndarray:
    """Append the unit row that multiplies the bias column."""
    return np.vstack([A, np.ones((1, A.shape[1]), dtype=A.dtype)])


def strip_bias(W: np.ndarray) -> np.ndarray:
    return W[:, :-1]


# ---------------------------------------------------------------- parameters


def init_params(spec: NetworkSpec, rng: np.random.Generator, scale: float = 1.0) -> list:
    """Uniform Glorot initialisation with zero biases."""
    params = []
    for rows, cols in spec.weight_shapes:
        limit = scale * np.sqrt(6.0 / (rows + cols - 1))
        W = np.zeros((rows, cols))
        W[:, :-1] = rng.uniform(-limit, limit, size=(rows, cols - 1))
        params.append(W)
    return params


def check_params(spec: NetworkSpec, params: Sequence[np.ndarray]) -> list:
    if len(params) != spec.n_layers:
        raise ContractError(f"expected {spec.n_layers} weight matrices, got {len(params)}")
    out = []
    for lam, (W, shape) in enumerate(zip(params, spec.weight_shapes), start=1):
        W = np.asarray(W, dtype=np.float64)
        if W.shape != shape:
            raise ContractError(f"W_{lam} has shape {W.shape}, expected {shape}")
        if not np.all(np.isfinite(W)):
            raise ContractError(f"W_{lam} has non-finite entries")
        out.append(W)
    return out


def flatten(params: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate column-major ``vec(W_lam)``."""
    return np.concatenate([W.ravel(order="F") for W in params])


def unflatten(spec: NetworkSpec, theta: np.ndarray) -> list:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ContractError(f"parameter vector has shape {theta.shape}, expected ({spec.n_params},)")
    out, start = [], 0
    for rows, cols in spec.weight_shapes:
        stop = start + rows * cols
        out.append(theta[start:stop].reshape((rows, cols), order="F"))
        start = stop
    return out


def layer_slices(spec: NetworkSpec) -> list:
    out, start = [], 0
    for rows, cols in spec.weight_shapes:
        out.append(slice(start, start + rows * cols))
        start += rows * cols
    return out


def save_params(path, params: Sequence[np.ndarray]) -> None:
    """Write the ``KNW1`` container: magic, layer count and sizes as
    little-endian uint32, then row-major little-endian float64 blocks."""
    sizes = [params[0].shape[1] - 1] + [W.shape[0] for W in params]
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack(f"<{len(sizes) + 1}I", len(params), *sizes))
        for W in params:
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes(order="C"))


def load_params(path) -> list:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PARAM_MAGIC:
        raise ParseError("bad parameter magic", 0)
    if len(raw) < 8:
        raise ParseError("truncated header", len(raw))
    (n_layers,) = struct.unpack_from("<I", raw, 4)
    hdr_end = 8 + 4 * (n_layers + 1)
    if len(raw) < hdr_end:
        raise ParseError("truncated layer sizes", len(raw))
    sizes = struct.unpack_from(f"<{n_layers + 1}I", raw, 8)
    params, offset = [], hdr_end
    for i in range(n_layers):
        rows, cols = sizes[i + 1], sizes[i] + 1
        nbytes = 8 * rows * cols
        if len(raw) < offset + nbytes:
            raise ParseError(f"truncated weight block {i + 1}", len(raw))
        W = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=offset)
        params.append(W.reshape(rows, cols).astype(np.float64))
        offset += nbytes
    if offset != len(raw):
        raise ParseError("trailing bytes after last weight block", offset)
    return params


# ------------------------------------------------------------ transfer funcs


def transfer(t: Transfer, H: np.ndarray) -> np.ndarray:
    kind = t.kind
    if kind == "relu":
        return np.maximum(H, 0.0)
    if kind == "leaky_relu":
        return np.where(H > 0, H, t.slope * H)
    if kind == "tanh":
        return np.tanh(H)
    if kind == "sigmoid":
        return expit(H)
    return H.copy()


def transfer_derivs(t, H: np.ndarray):
    """Elementwise first and second derivatives of the transfer function.

    Piecewise-linear kinds have zero second derivative; at the kink the
    derivative is taken as 0 for relu and as the slope for leaky_relu.
    """
    t = parse_transfer(t)
    H = np.asarray(H, dtype=np.float64)
    zero = np.zeros_like(H)
    if t.kind == "relu":
        return (H > 0).astype(np.float64), zero
    if t.kind == "leaky_relu":
        return np.where(H > 0, 1.0, t.slope), zero
    if t.kind == "tanh":
        a = np.tanh(H)
        d1 = 1.0 - a * a
        return d1, -2.0 * a * d1
    if t.kind == "sigmoid":
        s = expit(H)
        d1 = s * (1.0 - s)
        return d1, d1 * (1.0 - 2.0 * s)
    return np.ones_like(H), zero


# ------------------------------------------------------------------- forward


def check_inputs(spec: NetworkSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != spec.layer_sizes[0] or X.shape[1] < 1:
        raise ContractError(f"inputs must have shape ({spec.layer_sizes[0]}, N), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ContractError("inputs have non-finite entries")
    return X


def forward(spec: NetworkSpec, params: Sequence[np.ndarray], X) -> ForwardCache:
    X = check_inputs(spec, X)
    params = check_params(spec, params)
    H, A = [None], [X]
    for lam, W in enumerate(params, start=1):
        h = W[:, :-1] @ A[-1] + W[:, -1:]
        H.append(h)
        A.append(transfer(spec.transfer_of(lam), h))
    return ForwardCache(H, A)


# -------------------------------------------------------------------- losses


def check_targets(spec: NetworkSpec, cache: ForwardCache, Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    N = cache.n_samples
    if spec.loss == "binary_mixture":
        Y = Y.reshape(1, -1) if Y.ndim == 1 else Y
        if Y.shape != (1, N):
            raise ContractError(f"binary_mixture targets must have shape (1, {N}), got {Y.shape}")
        if not np.all((Y == 0) | (Y == 1)):
            raise ContractError("binary_mixture targets must be 0/1 labels")
    elif Y.shape != (spec.layer_sizes[-1], N):
        raise ContractError(f"targets must have shape {(spec.layer_sizes[-1], N)}, got {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ContractError("targets have non-finite entries")
    return Y


def _mixture_terms(h, y):
    """Log-domain pieces of ``p(y|h) = s(h1) s(+-h2) + s(-h1) s(+-h3)``."""
    sgn = 2.0 * y - 1.0
    u1 = log_expit(h[0]) + log_expit(sgn * h[1])
    u2 = log_expit(-h[0]) + log_expit(sgn * h[2])
    logp = np.logaddexp(u1, u2)
    r = np.exp(u1 - logp)  # posterior weight of the first classifier
    return sgn, logp, r


def per_sample_loss(spec: NetworkSpec, hL: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if spec.loss == "squared":
        return 0.5 * np.sum((Y - hL) ** 2, axis=0)
    if spec.loss == "bernoulli_xent":
        return np.sum(np.logaddexp(0.0, hL) - Y * hL, axis=0)
    _, logp, _ = _mixture_terms(hL, Y[0])
    return -logp


def loss_value(spec: NetworkSpec, cache: ForwardCache, Y) -> float:
    """Batch mean of the per-sample loss."""
    Y = check_targets(spec, cache, Y)
    with np.errstate(over="ignore", invalid="ignore"):
        e = per_sample_loss(spec, cache.output, Y)
    bad = np.flatnonzero(~np.isfinite(e))
    if bad.size:
        raise NumericBreakdownError(f"non-finite loss at sample {int(bad[0])}")
    return float(np.mean(e))


def output_gradient(spec: NetworkSpec, cache: ForwardCache, Y) -> np.ndarray:
    """Per-sample ``dE/dh_L`` as a ``(D_L, N)`` array."""
    Y = check_targets(spec, cache, Y)
    d = loss_gradient(spec, cache.output, Y)
    bad = np.flatnonzero(~np.all(np.isfinite(d), axis=0))
    if bad.size:
        raise NumericBreakdownError(f"non-finite output gradient at sample {int(bad[0])}")
    return d


def loss_gradient(spec: NetworkSpec, hL: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Unchecked ``dE/dh_L`` for raw outputs and matching targets."""
    if spec.loss == "squared":
        return hL - Y
    if spec.loss == "bernoulli_xent":
        return expit(hL) - Y
    sgn, _, r = _mixture_terms(hL, Y[0])
    pi = expit(hL[0])
    a = expit(sgn * hL[1])
    b = expit(sgn * hL[2])
    return -np.vstack([r - pi, r * sgn * (1.0 - a), (1.0 - r) * sgn * (1.0 - b)])


def output_hessian(spec: NetworkSpec, cache: ForwardCache, Y) -> np.ndarray:
    """Per-sample ``d^2 E / dh_L^2`` stacked as ``(N, D_L, D_L)``.

    The mixture Hessian can be indefinite and is returned unprojected.
    """
    Y = check_targets(spec, cache, Y)
    hL = cache.output
    D, N = hL.shape
    if spec.loss == "squared":
        return np.broadcast_to(np.eye(D), (N, D, D)).copy()
    if spec.loss == "bernoulli_xent":
        s = expit(hL)
        out = np.zeros((N, D, D))
        idx = np.arange(D)
        out[:, idx, idx] = (s * (1.0 - s)).T
        return out
    # log p = logsumexp(u1, u2) with responsibilities (r, 1 - r):
    # Hess log p = sum_i r_i (Hess u_i + grad u_i grad u_i^T) - grad log p grad log p^T
    sgn, _, r = _mixture_terms(hL, Y[0])
    pi = expit(hL[0])
    a = expit(sgn * hL[1])
    b = expit(sgn * hL[2])
    z = np.zeros(N)
    g1 = np.stack([1.0 - pi, sgn * (1.0 - a), z], axis=1)
    g2 = np.stack([-pi, z, sgn * (1.0 - b)], axis=1)
    h1 = np.stack([-pi * (1 - pi), -a * (1 - a), z], axis=1)
    h2 = np.stack([-pi * (1 - pi), z, -b * (1 - b)], axis=1)
    gl = r[:, None] * g1 + (1 - r)[:, None] * g2
    hess_logp = (
        r[:, None, None] * (_diag_stack(h1) + g1[:, :, None] * g1[:, None, :])
        + (1 - r)[:, None, None] * (_diag_stack(h2) + g2[:, :, None] * g2[:, None, :])
        - gl[:, :, None] * gl[:, None, :]
    )
    return -hess_logp


def _diag_stack(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[:, idx, idx] = v
    return out


# ------------------------------------------------------------------ backward


def backprop(spec: NetworkSpec, params: Sequence[np.ndarray], cache: ForwardCache, dL) -> list:
    """Backpropagate output gradients; returns ``d[lam] = dE/dh_lam`` with
    ``d[0] = None``. ``dL`` may have more columns than the cache when they
    are grouped per sample (``n_cols = N * S``, sample index fastest)."""
    L = spec.n_layers
    d = [None] * (L + 1)
    d[L] = np.asarray(dL, dtype=np.float64)
    reps = d[L].shape[1] // cache.n_samples
    for lam in range(L, 1, -1):
        fp, _ = transfer_derivs(spec.transfer_of(lam - 1), cache.H[lam - 1])
        if reps > 1:
            fp = np.tile(fp, reps)
        d[lam - 1] = (params[lam - 1][:, :-1].T @ d[lam]) * fp
    return d


def weight_gradients(cache: ForwardCache, d: Sequence, params=None, eta: float = 0.0) -> list:
    """``(1/N) d_lam [a_{lam-1}; 1]^T`` per layer, plus ``eta W`` when given."""
    N = cache.n_samples
    grads = []
    for lam in range(1, len(d)):
        g = d[lam] @ with_bias(cache.A[lam - 1]).T / N
        if eta and params is not None:
            g = g + eta * params[lam - 1]
        grads.append(g)
    return grads


def backward_gradients(
    spec: NetworkSpec, params: Sequence[np.ndarray], cache: ForwardCache, Y, eta: float = 0.0
) -> list:
    """Gradient of the batch-mean loss (plus ``eta/2 ||theta||^2``) per layer."""
    params = check_params(spec, params)
    d = backprop(spec, params, cache, output_gradient(spec, cache, Y))
    return weight_gradients(cache, d, params, eta)


def objective(spec: NetworkSpec, params, X, Y, eta: float = 0.0) -> float:
    """Batch-mean loss plus the L2 term ``eta/2 ||theta||^2``."""
    f = loss_value(spec, forward(spec, params, X), Y)
    if eta:
        f += 0.5 * eta * sum(float(np.sum(W * W)) for W in params)
    return f
