"""Run configuration, the training loop and CSV run logs."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Dataset, MinibatchSampler, gen_curves, gen_digits, load_idx
from .errors import ConfigError, ContractError, NumericBreakdownError
from .network import NetworkSpec, forward, init_params, loss_value, save_params
from .optimizer import (
    FIRST_ORDER,
    SECOND_ORDER,
    FirstOrderState,
    OptimizerState,
    SecondOrderOptimizer,
    first_order_step,
    param_average,
)
from .network import backward_gradients

log = logging.getLogger(__name__)

OPTIMIZERS = SECOND_ORDER + FIRST_ORDER
LOG_COLUMNS = (
    "iter",
    "wall_ms",
    "train_loss",
    "loss_at_theta_avg",
    "tau",
    "gamma",
    "alpha_star",
    "rho",
    "cg_iters",
)
DATASET_KEYS = {"kind", "count", "side", "seed", "images", "labels", "task", "jitter"}
NETWORK_KEYS = {"layer_sizes", "transfer", "loss"}


def fmt(x) -> str:
    """CSV float format: 17 significant digits."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass
class TrainConfig:
    dataset: dict
    network: dict
    optimizer: str = "kfra"
    batch_size: int = 250
    max_updates: int = 500
    seed: int = 0
    eta: float = 1e-5
    tau: float = 1e-2
    gamma: float = 1e-2
    curvature_ema: bool = False
    inversion: str = "approx"
    lr: float = 1e-3
    decay_period: Optional[int] = None
    kfac_samples: int = 1
    T_tau: int = 5
    T_gamma: int = 20
    cg_tol: float = 1e-6
    cg_max_iter: int = 250
    init_scale: float = 1.0
    eval_size: Optional[int] = None
    log_path: str = "train_log.csv"
    probe: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"dataset", "network"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        try:
            return cls(**d)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        if not isinstance(self.dataset, dict) or not isinstance(self.network, dict):
            raise ConfigError("dataset and network must be JSON objects")
        bad = set(self.dataset) - DATASET_KEYS
        if bad:
            raise ConfigError(f"unknown dataset keys: {sorted(bad)}")
        bad = set(self.network) - NETWORK_KEYS
        if bad:
            raise ConfigError(f"unknown network keys: {sorted(bad)}")
        if self.dataset.get("kind", "curves") not in ("curves", "digits", "idx"):
            raise ConfigError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.inversion not in ("approx", "exact"):
            raise ConfigError("inversion must be 'approx' or 'exact'")
        for name in ("batch_size", "max_updates", "kfac_samples", "T_tau", "T_gamma", "cg_max_iter"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("eta", "tau", "gamma"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v < 0:
                raise ConfigError(f"{name} must be a non-negative number")
        if self.lr <= 0 or self.cg_tol <= 0 or self.init_scale <= 0:
            raise ConfigError("lr, cg_tol and init_scale must be positive")
        if self.decay_period is not None and (not isinstance(self.decay_period, int) or self.decay_period < 1):
            raise ConfigError("decay_period must be null or a positive integer")
        try:
            self.spec()
        except ContractError as exc:
            raise ConfigError(f"invalid network: {exc}") from exc

    def spec(self) -> NetworkSpec:
        net = self.network
        if "layer_sizes" not in net:
            raise ConfigError("network.layer_sizes is required")
        return NetworkSpec(tuple(net["layer_sizes"]), net.get("transfer", "relu"), net.get("loss", "squared"))


def build_dataset(cfg: TrainConfig) -> Dataset:
    d = cfg.dataset
    kind = d.get("kind", "curves")
    task = d.get("task", "odd_even" if kind == "digits" else "autoencoder")
    if task not in ("autoencoder", "odd_even"):
        raise ConfigError(f"unknown task {task!r}")
    if kind == "curves":
        ds = gen_curves(int(d.get("count", 4000)), int(d.get("side", 12)), int(d.get("seed", cfg.seed)))
    elif kind == "digits":
        ds = gen_digits(
            int(d.get("count", 4000)),
            int(d.get("side", 12)),
            int(d.get("seed", cfg.seed)),
            float(d.get("jitter", 0.05)),
        )
    else:
        if "images" not in d:
            raise ConfigError("idx dataset needs an 'images' path")
        X = load_idx(d["images"])
        if task == "odd_even":
            if "labels" not in d:
                raise ConfigError("odd_even task needs a 'labels' path")
            digits = load_idx(d["labels"], scale=False)[0].astype(np.int64)
            ds = Dataset(X, (digits % 2)[None, :].astype(np.float64), digits=digits)
        else:
            ds = Dataset(X, X)
        count = d.get("count")
        if count:
            ds = Dataset(ds.inputs[:, :count], ds.targets[:, :count], digits=None if ds.digits is None else ds.digits[:count])
    if task == "autoencoder":
        ds = Dataset(ds.inputs, ds.inputs, side=ds.side, digits=ds.digits)
    elif ds.targets.shape[0] != 1:
        raise ConfigError(f"odd_even task is not available for dataset kind {kind!r}")
    return ds


def check_dataset(spec: NetworkSpec, ds: Dataset) -> None:
    """Raise :class:`ConfigError` when the data cannot feed the network."""
    if ds.inputs.shape[0] != spec.layer_sizes[0]:
        raise ConfigError(f"dataset has {ds.inputs.shape[0]} features, network expects {spec.layer_sizes[0]}")
    want = 1 if spec.loss == "binary_mixture" else spec.layer_sizes[-1]
    if ds.targets.shape[0] != want:
        raise ConfigError(f"targets have {ds.targets.shape[0]} rows, the {spec.loss} output needs {want}")


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    initial_loss: float = float("nan")

    def append(self, rec: dict):
        if self.records and rec["iter"] <= self.records[-1]["iter"]:
            raise ContractError("run log iterations must increase")
        self.records.append(rec)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([fmt(r[c]) for c in LOG_COLUMNS])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.records.append(
                    {k: (int(v) if k in ("iter", "cg_iters") else float(v)) for k, v in row.items()}
                )
        return out


@dataclass
class TrainResult:
    log: RunLog
    params: list
    params_avg: list
    config: Optional[TrainConfig] = None
    status: str = "ok"


class Trainer:
    """Training loop shared by the CLI and the estimator.

    ``X`` and ``Y`` hold one sample per column. The training loss recorded
    after each update is evaluated on the first ``eval_size`` samples.
    """

    def __init__(self, spec: NetworkSpec, cfg: TrainConfig):
        self.spec = spec
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.init_rng = np.random.default_rng(seeds[0])
        self.batch_rng = np.random.default_rng(seeds[1])
        self.mc_rng = np.random.default_rng(seeds[2])

    def _loss(self, params, X, Y):
        return loss_value(self.spec, forward(self.spec, params, X), Y)

    def run(self, X, Y, params=None, callback: Optional[Callable] = None, checkpoint: Optional[Callable] = None):
        cfg, spec = self.cfg, self.spec
        if params is None:
            params = init_params(spec, self.init_rng, cfg.init_scale)
        n = X.shape[1]
        m = n if cfg.eval_size is None else min(cfg.eval_size, n)
        Xe, Ye = X[:, :m], Y[:, :m]
        sampler = MinibatchSampler(n, min(cfg.batch_size, n), self.batch_rng)
        runlog = RunLog(initial_loss=self._loss(params, Xe, Ye))
        second = cfg.optimizer in SECOND_ORDER
        if second:
            state = OptimizerState.with_periods(cfg.T_tau, cfg.T_gamma, tau=cfg.tau, gamma=cfg.gamma, eta=cfg.eta)
            opt = SecondOrderOptimizer(
                spec,
                cfg.optimizer,
                state,
                inversion=cfg.inversion,
                use_ema=cfg.curvature_ema,
                kfac_samples=cfg.kfac_samples,
                cg_tol=cfg.cg_tol,
                cg_max_iter=cfg.cg_max_iter,
                rng=self.mc_rng,
            )
        else:
            state = OptimizerState(tau=0.0, gamma=0.0, eta=cfg.eta)
            fo_state = FirstOrderState()
        status = "ok"
        t0 = time.perf_counter()
        for it in range(1, cfg.max_updates + 1):
            idx = sampler.next()
            Xb, Yb = X[:, idx], Y[:, idx]
            try:
                # overflow shows up as non-finite values, which are checked explicitly
                with np.errstate(over="ignore", invalid="ignore"):
                    if second:
                        new_params = opt.step(params, Xb, Yb)
                        info = opt.last
                    else:
                        grads = backward_gradients(spec, params, forward(spec, params, Xb), Yb, cfg.eta)
                        new_params = first_order_step(cfg.optimizer, fo_state, params, grads, cfg.lr, cfg.decay_period)
                        param_average(state, new_params)
                        info = {"tau": math.nan, "gamma": math.nan, "alpha": math.nan, "rho": math.nan, "cg_iters": 0}
                    if not all(np.all(np.isfinite(W)) for W in new_params):
                        raise NumericBreakdownError(f"non-finite parameters after update {it}")
                    train_loss = self._loss(new_params, Xe, Ye)
                    avg_loss = self._loss(state.theta_avg, Xe, Ye)
            except (NumericBreakdownError, ArithmeticError) as exc:
                log.error("numeric breakdown at update %d: %s", it, exc)
                status = f"numeric breakdown at update {it}: {exc}"
                break
            params = new_params
            rec = {
                "iter": it,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
                "train_loss": train_loss,
                "loss_at_theta_avg": avg_loss,
                "tau": info["tau"],
                "gamma": info["gamma"],
                "alpha_star": info["alpha"],
                "rho": info["rho"],
                "cg_iters": int(info["cg_iters"]),
            }
            runlog.append(rec)
            if callback is not None:
                callback(rec, params, opt.last if second else None, Xb, Yb)
        avg = state.theta_avg if state.theta_avg is not None else [W.copy() for W in params]
        return TrainResult(runlog, params, avg, cfg, status)


def run_training(cfg: TrainConfig, out_dir=None, dataset: Optional[Dataset] = None, callback=None) -> TrainResult:
    """Train per ``cfg``; with ``out_dir`` writes the CSV log, ``params.knw``,
    ``params_avg.knw`` and ``summary.json``."""
    spec = cfg.spec()
    ds = dataset if dataset is not None else build_dataset(cfg)
    check_dataset(spec, ds)
    result = Trainer(spec, cfg).run(ds.inputs, ds.targets, callback=callback)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: TrainResult, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.config
    result.log.write_csv(os.path.join(out_dir, cfg.log_path))
    save_params(os.path.join(out_dir, "params.knw"), result.params)
    save_params(os.path.join(out_dir, "params_avg.knw"), result.params_avg)
    recs = result.log.records
    summary = {
        "status": result.status,
        "optimizer": cfg.optimizer,
        "updates": len(recs),
        "initial_loss": result.log.initial_loss,
        "final_loss": recs[-1]["train_loss"] if recs else result.log.initial_loss,
        "final_loss_theta_avg": recs[-1]["loss_at_theta_avg"] if recs else result.log.initial_loss,
        "config": cfg.to_dict(),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x)}")
