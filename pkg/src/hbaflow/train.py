"""Maximum-likelihood training with AdaMax and global-norm gradient clipping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from hbaflow import diffcore as dc
from hbaflow.checkpoint import load_checkpoint, save_checkpoint
from hbaflow.model import HBAFlowModel
from hbaflow.nn import track

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class OptimizerState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr: float = 2e-3
    lr_final: float = 0.0  # 0 = constant lr; else geometric decay to this by the last epoch
    clip_norm: float = 5.0
    seed: int = 0
    eval_interval: int = 1
    max_steps: int = 0  # 0 = no cap
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.lr_final < 0:
            raise ValueError(f"lr_final must be >= 0, got {self.lr_final}")

    def lr_at(self, epoch: int) -> float:
        if not self.lr_final or self.epochs <= 1:
            return self.lr
        frac = (epoch - 1) / (self.epochs - 1)
        return self.lr * (self.lr_final / self.lr) ** frac


def nll_batch(model: HBAFlowModel, xs, ys, P: Mapping | None = None):
    """``-mean log p(y | x)`` over the batch as a (tracked) scalar."""
    P = track(model.params) if P is None else P
    ll, _ = model.forward(P, ys, xs)
    return -dc.mean(ll)


def adamax_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                state: OptimizerState) -> dict[str, np.ndarray]:
    """One AdaMax update; returns new parameter arrays and mutates ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    rate = state.lr / (1.0 - b1 ** state.step)
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        u = state.u.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        u = np.maximum(b2 * u, np.abs(g))
        state.m[name], state.u[name] = m, u
        out[name] = p - rate * m / (u + state.eps)
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


def loss_and_grads(model: HBAFlowModel, xs, ys) -> tuple[float, dict[str, np.ndarray]]:
    P = track(model.params)
    loss = nll_batch(model, xs, ys, P)
    g = dc.backward(loss)
    grads = {k: g.get(a.id, np.zeros_like(a.value)) for k, a in P.items()}
    return float(loss.value), grads


@dataclass
class TrainResult:
    model: HBAFlowModel
    log: list[dict]
    best_val: float
    state: OptimizerState


def _mean_nll(model: HBAFlowModel, xs, ys, batch: int = 256) -> float:
    if len(xs) == 0:
        return float("nan")
    tot = 0.0
    for i in range(0, len(xs), batch):
        tot += float(np.sum(model.log_likelihood(ys[i:i + batch], xs[i:i + batch])))
    return -tot / len(xs)


def train(model: HBAFlowModel, train_xy: tuple[np.ndarray, np.ndarray],
          val_xy: tuple[np.ndarray, np.ndarray] | None, cfg: TrainConfig,
          state: OptimizerState | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch training; keeps the parameters with the best validation NLL."""
    xs, ys = train_xy
    state = state or OptimizerState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 104729 * state.step)
    n = len(xs)
    history = []
    best_val, best_params = math.inf, None
    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    steps_done = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_final:
            state.lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, xs[idx], ys[idx])
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                diag = {
                    "epoch": epoch, "batch": bi, "step": state.step, "loss": loss,
                    "alpha": ",".join(f"{a:.6g}" for a in model.alpha_values()),
                    "max_abs_param": max(float(np.max(np.abs(v))) for v in model.params.values()),
                }
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {bi}", diag)
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            model.params = adamax_step(model.params, grads, state)
            losses.append(loss)
            steps_done += 1
            if cfg.max_steps and steps_done >= cfg.max_steps:
                break
        val = _mean_nll(model, *val_xy) if val_xy is not None and len(val_xy[0]) else float("nan")
        rec = {"epoch": epoch, "train_nll": float(np.mean(losses)), "val_nll": val,
               "alpha": model.alpha_values()[0], "wall_seconds": time.perf_counter() - t0}
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f alpha %.4f", epoch, rec["train_nll"], val,
                 rec["alpha"])
        if on_epoch:
            on_epoch(rec)
        score = val if math.isfinite(val) else rec["train_nll"]
        if score < best_val:
            best_val = score
            best_params = {k: v.copy() for k, v in model.params.items()}
            if ckdir:
                save_checkpoint(model, ckdir / "best.hbaf", {"train.step": state.step})
        if cfg.max_steps and steps_done >= cfg.max_steps:
            break
    if best_params is not None:
        model.params = best_params
    return TrainResult(model, history, best_val, state)


def format_log_line(rec: dict) -> str:
    return (f"{rec['epoch']},{rec['train_nll']!r},{rec['val_nll']!r},{rec['alpha']!r},"
            f"{rec['wall_seconds']:.3f}")


def optimizer_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {}
    for k, v in state.m.items():
        out[f"opt.m.{k}"] = v
    for k, v in state.u.items():
        out[f"opt.u.{k}"] = v
    return out


def save_training_checkpoint(model: HBAFlowModel, state: OptimizerState, path) -> None:
    extra = {"train.step": state.step, "train.lr": repr(state.lr)}
    save_checkpoint(model, path, extra, optimizer_arrays(state))


def load_training_checkpoint(path) -> tuple[HBAFlowModel, OptimizerState]:
    model, extra, arrays = load_checkpoint(path, with_extra=True)
    state = OptimizerState(lr=float(extra.get("train.lr", 2e-3)),
                           step=int(extra.get("train.step", 0)))
    for k, v in arrays.items():
        if k.startswith("opt.m."):
            state.m[k[6:]] = v
        elif k.startswith("opt.u."):
            state.u[k[6:]] = v
    return model, state
