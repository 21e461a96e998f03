"""Diagnostics: update alignment, curvature rank and loss-surface slices."""
from __future__ import annotations

import csv
import itertools
import numpy as np

from .curvature import GNOperator, compute_blocks, output_curvature, preact_hessian_per_sample
from .data import MinibatchSampler
from .errors import ConfigError, KFGNError
from .linalg import cg_solve
from .network import (
    backward_gradients,
    flatten,
    forward,
    init_params,
    layer_slices,
    load_params,
    loss_value,
    with_bias,
)
from .optimizer import kf_update
from .training import TrainConfig, build_dataset, check_dataset, fmt
from .verify import brute_force_gn, numerical_rank

ALIGNMENT_COLUMNS = ("method", "inversion", "layer", "cos_block_gn", "cos_full_gn", "cg_iters", "status")
SURFACE_COLUMNS = ("x", "y", "loss", "block_trace")


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _setup(cfg: TrainConfig, params=None, data=None):
    """Network, parameters, one minibatch and the Monte Carlo generator.

    ``data`` optionally replaces the configured dataset by an ``(X, Y)`` pair.
    """
    spec = cfg.spec()
    if data is None:
        ds = build_dataset(cfg)
        check_dataset(spec, ds)
        inputs, targets = ds.inputs, ds.targets
    else:
        inputs, targets = (np.asarray(a, dtype=np.float64) for a in data)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if params is None:
        snap = cfg.probe.get("snapshot")
        params = load_params(snap) if snap else init_params(spec, np.random.default_rng(seeds[0]), cfg.init_scale)
    M = inputs.shape[1]
    idx = MinibatchSampler(M, min(cfg.batch_size, M), np.random.default_rng(seeds[1])).next()
    return spec, params, inputs[:, idx], targets[:, idx], np.random.default_rng(seeds[2])


def probe_alignment(cfg: TrainConfig, params=None, data=None) -> list:
    """Cosines between approximate updates and exact block/full GN updates on one batch.

    Every direction solves its curvature system damped by ``gamma + eta`` and
    is compared before any line-search rescaling.
    """
    spec, params, X, Y, rng = _setup(cfg, params, data)
    cache = forward(spec, params, X)
    HL = output_curvature(spec, cache, Y)
    grads = backward_gradients(spec, params, cache, Y, cfg.eta)
    op = GNOperator(spec, params, cache, HL=HL)
    k = cfg.gamma + cfg.eta
    g = flatten(grads)
    slices = layer_slices(spec)
    rows = []

    block, block_iters, block_status = None, 0, "ok"
    try:
        parts = []
        for lam, gl in enumerate(grads, start=1):
            res = cg_solve(lambda v, lam=lam: op.block_matvec(lam, v) + k * v, gl.ravel(order="F"), cfg.cg_tol, cfg.cg_max_iter)
            parts.append(res.x)
            block_iters += res.iters
        block = np.concatenate(parts)
    except KFGNError as exc:
        block_status = f"block_gn_cg failed: {exc}"
    full, full_iters, full_status = None, 0, "ok"
    try:
        res = cg_solve(lambda v: op.matvec(v) + k * v, g, cfg.cg_tol, cfg.cg_max_iter)
        full, full_iters = res.x, res.iters
    except KFGNError as exc:
        full_status = f"full_gn_cg failed: {exc}"

    def emit(method, inversion, vec, iters, status):
        for lam, sl in enumerate(slices, start=1):
            rows.append({
                "method": method, "inversion": inversion, "layer": str(lam),
                "cos_block_gn": _cos(vec[sl], block[sl]) if block is not None and vec is not None else float("nan"),
                "cos_full_gn": _cos(vec[sl], full[sl]) if full is not None and vec is not None else float("nan"),
                "cg_iters": iters, "status": status,
            })
        rows.append({
            "method": method, "inversion": inversion, "layer": "all",
            "cos_block_gn": _cos(vec, block) if block is not None and vec is not None else float("nan"),
            "cos_full_gn": _cos(vec, full) if full is not None and vec is not None else float("nan"),
            "cg_iters": iters, "status": status,
        })

    emit("block_gn_cg", "cg", block, block_iters, block_status)
    emit("full_gn_cg", "cg", full, full_iters, full_status)
    for method, backend in (("kfra", "kfra"), ("kflr", "kflr"), ("kfac", "kfac_mc")):
        try:
            blocks = compute_blocks(backend, spec, params, cache, Y, rng=rng, S=cfg.kfac_samples, HL=HL)
        except KFGNError as exc:
            for inv in ("approx", "exact"):
                emit(method, inv, None, 0, f"failed: {exc}")
            continue
        for inv in ("approx", "exact"):
            try:
                emit(method, inv, flatten(kf_update(grads, blocks, cfg.eta, cfg.gamma, inv)), 0, "ok")
            except KFGNError as exc:
                emit(method, inv, None, 0, f"failed: {exc}")
    return rows


def probe_rank(cfg: TrainConfig, params=None, data=None) -> dict:
    """Numerical rank of the dense minibatch GN against ``rank(H_L) * N``."""
    spec, params, X, Y, _ = _setup(cfg, params, data)
    N = X.shape[1]
    cache = forward(spec, params, X)
    HL = output_curvature(spec, cache, Y)
    rank_hl = max(numerical_rank(H) for H in HL)
    G = brute_force_gn(spec, params, X, Y)
    op = GNOperator(spec, params, cache, HL=HL)
    G_mv = np.column_stack([op.matvec(e) for e in np.eye(spec.n_params)])
    return {
        "n_samples": N,
        "n_params": spec.n_params,
        "rank_output_hessian": rank_hl,
        "rank": numerical_rank(G),
        "rank_matvec": numerical_rank(0.5 * (G_mv + G_mv.T)),
        "bound": rank_hl * N,
    }


def _directions(spec, params, rng, layers, mode):
    def rand_like(W):
        U = rng.standard_normal(W.shape)
        return U / np.linalg.norm(U)

    zeros = [np.zeros_like(W) for W in params]
    U, V = [z.copy() for z in zeros], [z.copy() for z in zeros]
    if mode == "single":
        (lam,) = layers
        U[lam - 1], V[lam - 1] = rand_like(params[lam - 1]), rand_like(params[lam - 1])
    elif mode == "pair":
        for lam in layers:
            U[lam - 1], V[lam - 1] = rand_like(params[lam - 1]), rand_like(params[lam - 1])
    elif mode == "joint":
        lam, beta = layers
        U[lam - 1], V[beta - 1] = rand_like(params[lam - 1]), rand_like(params[beta - 1])
    else:
        raise ConfigError(f"unknown surface mode {mode!r}")
    return U, V


def hessian_block_trace(spec, params, X, Y) -> float:
    """Sum over layers of the trace of the batch-mean diagonal Hessian blocks."""
    cache = forward(spec, params, X)
    total = 0.0
    for n in range(X.shape[1]):
        Hs = preact_hessian_per_sample(spec, params, cache, Y, n)
        for lam, H in enumerate(Hs, start=1):
            a = with_bias(cache.A[lam - 1][:, n : n + 1])[:, 0]
            total += (a @ a) * np.trace(H)
    return total / X.shape[1]


def surface_slice(cfg: TrainConfig, params=None, data=None) -> list:
    """Loss over ``W + xU + yV`` on a square grid for random unit directions.

    ``cfg.probe['surface']`` accepts ``mode`` (single, pair or joint),
    ``layers``, ``grid`` points per axis, ``extent`` and ``seed``.
    """
    spec, params, X, Y, _ = _setup(cfg, params, data)
    opts = dict(cfg.probe.get("surface", {}))
    mode = opts.get("mode", "single")
    layers = list(opts.get("layers", [1] if mode == "single" else [1, 2]))
    if any(not 1 <= lam <= spec.n_layers for lam in layers):
        raise ConfigError(f"layers {layers} out of range 1..{spec.n_layers}")
    if (mode == "single") != (len(layers) == 1) or (mode == "joint" and len(layers) != 2):
        raise ConfigError(f"mode {mode!r} does not fit layers {layers}")
    grid = int(opts.get("grid", 21))
    extent = float(opts.get("extent", 1.0))
    with_trace = bool(opts.get("trace", spec.n_params <= 2000))
    rng = np.random.default_rng(int(opts.get("seed", cfg.seed)))
    U, V = _directions(spec, params, rng, layers, mode)
    axis = np.zeros(1) if grid == 1 else np.linspace(-extent, extent, grid)
    rows = []
    for x, y in itertools.product(axis, axis):
        P = [W + x * u + y * v for W, u, v in zip(params, U, V)]
        rows.append({
            "x": x, "y": y,
            "loss": loss_value(spec, forward(spec, P, X), Y),
            "block_trace": hessian_block_trace(spec, P, X, Y) if with_trace else float("nan"),
        })
    return rows


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else fmt(r[c]) for c in columns])
