"""Second-order updates from Kronecker-factored curvature, damping
adaptation, parameter averaging and first-order baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .curvature import CurvatureBlocks, GNOperator, compute_blocks, output_curvature
from .errors import ContractError, CurvatureBreakdownError, SingularMatrixError
from .linalg import cg_solve, kron_solve_approx, kron_solve_exact, omega_star
from .network import (
    NetworkSpec,
    backprop,
    flatten,
    forward,
    layer_slices,
    loss_value,
    output_gradient,
    unflatten,
    weight_gradients,
)

log = logging.getLogger(__name__)

SECOND_ORDER = ("kfra", "kflr", "kfac", "block_gn_cg", "full_gn_cg")
FIRST_ORDER = ("sgd", "momentum", "nag", "adam")
KRONECKER = {"kfra": "kfra", "kflr": "kflr", "kfac": "kfac_mc"}
EMA_DECAY = 0.9


@dataclass
class OptimizerState:
    tau: float = 1e-2
    gamma: float = 1e-2
    eta: float = 1e-5
    iter: int = 0
    T_tau: int = 5
    T_gamma: int = 20
    omega_tau: float = 0.95**5
    omega_gamma: float = 0.95**20
    curvature_ema: Optional[CurvatureBlocks] = None
    theta_avg: Optional[list] = None
    avg_count: int = 0

    def __post_init__(self):
        if min(self.tau, self.gamma, self.eta) < 0:
            raise ContractError("tau, gamma and eta must be non-negative")
        if not (0 < self.omega_tau < 1 and 0 < self.omega_gamma < 1):
            raise ContractError("omega_tau and omega_gamma must lie in (0, 1)")

    @classmethod
    def with_periods(cls, T_tau=5, T_gamma=20, **kw):
        return cls(T_tau=T_tau, T_gamma=T_gamma, omega_tau=0.95**T_tau, omega_gamma=0.95**T_gamma, **kw)


@dataclass
class StepSize:
    alpha: float
    delta: list
    model_decrease: float
    curvature: float  # delta_tilde^T C_bar delta_tilde


def _dot(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum(x * y) for x, y in zip(a, b)))


# ------------------------------------------------------------- Kronecker step


def kf_update(
    grads: Sequence[np.ndarray],
    blocks: CurvatureBlocks,
    eta: float,
    gamma: float,
    inversion: str = "approx",
    norm: str = "trace",
) -> list:
    """Unscaled direction ``(Q kron G + kI)^-1 g`` per layer with ``k = eta + gamma``.

    ``approx`` splits the damping over both factors with the trace-norm optimal
    ``omega``; ``exact`` goes through eigendecompositions.
    """
    if len(grads) != blocks.n_layers:
        raise ContractError("gradients and curvature blocks are not layer-aligned")
    k = eta + gamma
    if k < 0:
        raise ContractError("eta + gamma must be non-negative")
    out = []
    for lam, (g, Q, G) in enumerate(zip(grads, blocks.Q, blocks.G), start=1):
        if np.trace(G) <= 0 or np.trace(Q) <= 0:
            # Q kron G vanishes, the damped block is kI
            if k == 0:
                raise SingularMatrixError(f"layer {lam}: zero curvature factor and no damping")
            out.append(g / k)
            continue
        if inversion == "exact":
            out.append(kron_solve_exact(Q, G, k, g))
        elif inversion == "approx":
            w = omega_star(Q, G, norm)
            out.append(kron_solve_approx(Q, G, k, g, w, context=f"layer {lam}"))
        else:
            raise ContractError(f"unknown inversion mode {inversion!r}")
    return out


def step_size(
    delta: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    gn_quad: Callable[[np.ndarray], float],
    tau: float,
    eta: float,
) -> StepSize:
    """Exact minimiser of the full-GN quadratic model along ``delta``.

    ``gn_quad(v)`` must return ``v^T G_bar v`` for a flat parameter vector.
    """
    gd = _dot(delta, grads)
    curv = gn_quad(flatten(delta)) + (tau + eta) * _dot(delta, delta)
    if not (np.isfinite(curv) and curv > 0):
        raise CurvatureBreakdownError(
            f"line-search curvature {curv:.3g} is not positive; check tau + eta"
        )
    alpha = -gd / curv
    decrease = alpha * gd + 0.5 * alpha * alpha * curv
    return StepSize(alpha, [alpha * d for d in delta], decrease, curv)


def quadratic_model(alpha: float, gd: float, curv: float) -> float:
    """``f_hat(alpha delta) - f_hat(0)`` given ``delta^T g`` and ``delta^T C delta``."""
    return alpha * gd + 0.5 * alpha * alpha * curv


# ----------------------------------------------------------------- adaptation


def lm_adapt_tau(state: OptimizerState, rho: float) -> OptimizerState:
    """Levenberg-Marquardt rule: shrink tau when the quadratic model is
    trustworthy (rho > 0.75), grow it when it is poor (rho < 0.25)."""
    if not np.isfinite(rho):
        state.tau /= state.omega_tau
    elif rho > 0.75:
        state.tau *= state.omega_tau
    elif rho < 0.25:
        state.tau /= state.omega_tau
    return state


def greedy_adapt_gamma(state: OptimizerState, evaluate: Callable[[float], float]):
    """Try ``gamma`` scaled by ``omega_gamma``, 1 and ``1/omega_gamma`` and keep
    the one with the lowest model value. Ties keep the current value.

    Returns ``(state, {gamma: value})``.
    """
    g = state.gamma
    w = state.omega_gamma
    candidates = [g, w * g, g / w]
    values = {}
    best, best_val = g, None
    for c in candidates:
        v = evaluate(c)
        values[c] = v
        if best_val is None or v < best_val:
            best, best_val = c, v
    state.gamma = best
    return state, values


def param_average(state: OptimizerState, theta_t: Sequence[np.ndarray]) -> list:
    """``theta_hat_t = b_t theta_hat_{t-1} + (1 - b_t) theta_t`` with
    ``b_t = min(0.95, 1 - 1/t)``."""
    state.avg_count += 1
    t = state.avg_count
    beta = min(0.95, 1.0 - 1.0 / t)
    if state.theta_avg is None:
        state.theta_avg = [np.array(W, dtype=np.float64) for W in theta_t]
    else:
        state.theta_avg = [beta * a + (1.0 - beta) * W for a, W in zip(state.theta_avg, theta_t)]
    return state.theta_avg


def curvature_ema(state: OptimizerState, fresh: CurvatureBlocks, decay: float = EMA_DECAY):
    prev = state.curvature_ema
    if prev is None:
        state.curvature_ema = fresh
        return fresh
    if prev.method != fresh.method:
        raise ContractError(f"cannot average {fresh.method} blocks into {prev.method} blocks")
    blended = CurvatureBlocks(
        fresh.method,
        [decay * a + (1 - decay) * b for a, b in zip(prev.Q, fresh.Q)],
        [decay * a + (1 - decay) * b for a, b in zip(prev.G, fresh.G)],
        fresh.batch_size,
        fresh.sample_count,
    )
    state.curvature_ema = blended
    return blended


# ---------------------------------------------------------------- first order


@dataclass
class FirstOrderState:
    iter: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    velocity: Optional[list] = None
    m: Optional[list] = None
    v: Optional[list] = None


def scheduled_lr(lr: float, t: int, decay_period: Optional[int]) -> float:
    """Learning rate after ``t`` completed updates, halved every ``decay_period``."""
    if not decay_period:
        return lr
    return lr * 0.5 ** (t // decay_period)


def first_order_step(
    kind: str,
    state: FirstOrderState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float = 1e-3,
    decay_period: Optional[int] = None,
) -> list:
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    if kind not in FIRST_ORDER:
        raise ContractError(f"unknown first-order method {kind!r}")
    step_lr = scheduled_lr(lr, state.iter, decay_period)
    state.iter += 1
    if kind == "sgd":
        return [W - step_lr * g for W, g in zip(params, grads)]
    if kind in ("momentum", "nag"):
        mu = state.momentum
        if state.velocity is None:
            state.velocity = [np.zeros_like(W) for W in params]
        old = state.velocity
        new = [mu * v - step_lr * g for v, g in zip(old, grads)]
        state.velocity = new
        if kind == "momentum":
            return [W + v for W, v in zip(params, new)]
        # Nesterov in the look-ahead-free form
        return [W - mu * vo + (1 + mu) * vn for W, vo, vn in zip(params, old, new)]
    if state.m is None:
        state.m = [np.zeros_like(W) for W in params]
        state.v = [np.zeros_like(W) for W in params]
    b1, b2, t = state.beta1, state.beta2, state.iter
    state.m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, grads)]
    state.v = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    return [
        W - step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        for W, m, v in zip(params, state.m, state.v)
    ]


# ------------------------------------------------------------ full GN driver


def objective_on(spec, params, X, Y, eta) -> float:
    f = loss_value(spec, forward(spec, params, X), Y)
    return f + 0.5 * eta * sum(float(np.sum(W * W)) for W in params)


class SecondOrderOptimizer:
    """One damped Gauss-Newton update per call to :meth:`step`.

    ``kind`` selects how the direction is found: a Kronecker backend
    (``kfra``, ``kflr``, ``kfac``) or conjugate gradients on the exact
    layerwise (``block_gn_cg``) or full (``full_gn_cg``) Gauss-Newton matrix.
    All kinds share the line search, the tau/gamma adaptation and parameter
    averaging.
    """

    def __init__(
        self,
        spec: NetworkSpec,
        kind: str = "kfra",
        state: Optional[OptimizerState] = None,
        inversion: str = "approx",
        use_ema: bool = False,
        kfac_samples: int = 1,
        cg_tol: float = 1e-6,
        cg_max_iter: int = 250,
        rng: Optional[np.random.Generator] = None,
    ):
        if kind not in SECOND_ORDER:
            raise ContractError(f"unknown second-order method {kind!r}")
        if kind == "kfac" and rng is None:
            raise ContractError("kfac needs a seeded random generator")
        self.spec = spec
        self.kind = kind
        self.state = state if state is not None else OptimizerState()
        self.inversion = inversion
        self.use_ema = use_ema
        self.kfac_samples = kfac_samples
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        self.rng = rng
        self.last = None

    def direction(self, gamma, grads, blocks, op):
        """Returns ``(delta_tilde, cg_iterations)``."""
        eta = self.state.eta
        k = gamma + eta
        if blocks is not None:
            return kf_update(grads, blocks, eta, gamma, self.inversion), 0
        if self.kind == "full_gn_cg":
            res = cg_solve(lambda v: op.matvec(v) + k * v, flatten(grads), self.cg_tol, self.cg_max_iter)
            return unflatten(self.spec, res.x), res.iters
        out, iters = [], 0
        for lam, g in enumerate(grads, start=1):
            res = cg_solve(
                lambda v, lam=lam: op.block_matvec(lam, v) + k * v,
                g.ravel(order="F"),
                self.cg_tol,
                self.cg_max_iter,
            )
            out.append(res.x.reshape(g.shape, order="F"))
            iters += res.iters
        return out, iters

    def step(self, params, X, Y):
        st = self.state
        t = st.iter + 1
        spec = self.spec
        cache = forward(spec, params, X)
        HL = output_curvature(spec, cache, Y)
        d = backprop(spec, params, cache, output_gradient(spec, cache, Y))
        grads = weight_gradients(cache, d, params, st.eta)
        batch_loss = loss_value(spec, cache, Y)
        f0 = batch_loss + 0.5 * st.eta * sum(float(np.sum(W * W)) for W in params)
        op = GNOperator(spec, params, cache, HL=HL)

        blocks = None
        if self.kind in KRONECKER:
            blocks = compute_blocks(
                KRONECKER[self.kind], spec, params, cache, Y, rng=self.rng, S=self.kfac_samples, HL=HL
            )
            if self.use_ema:
                blocks = curvature_ema(st, blocks)

        cg_iters = 0
        tau_used = st.tau
        if t % st.T_gamma == 0:
            trials = {}

            def evaluate(gamma):
                nonlocal cg_iters
                delta, it = self.direction(gamma, grads, blocks, op)
                cg_iters += it
                trials[gamma] = (delta, step_size(delta, grads, op.quad, st.tau, st.eta))
                return trials[gamma][1].model_decrease

            greedy_adapt_gamma(st, evaluate)
            delta, step = trials[st.gamma]
        else:
            delta, cg_iters = self.direction(st.gamma, grads, blocks, op)
            step = step_size(delta, grads, op.quad, st.tau, st.eta)

        new_params = [W + s for W, s in zip(params, step.delta)]
        rho = float("nan")
        if t % st.T_tau == 0:
            f1 = objective_on(spec, new_params, X, Y, st.eta)
            rho = (f1 - f0) / step.model_decrease if step.model_decrease != 0 else float("nan")
            lm_adapt_tau(st, rho)
        st.iter = t
        param_average(st, new_params)
        self.last = {
            "iter": t,
            "delta_tilde": delta,
            "grads": grads,
            "alpha": step.alpha,
            "model_decrease": step.model_decrease,
            "tau": st.tau,
            "tau_used": tau_used,
            "gamma": st.gamma,
            "rho": rho,
            "cg_iters": cg_iters,
            "batch_loss": batch_loss,
        }
        return new_params
