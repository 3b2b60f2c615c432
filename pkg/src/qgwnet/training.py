"""Adam training loop with per-sample quantile sampling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward
from .data import WindowedDataset
from .errors import TrainingDiverged
from .graph import TransitionMatrices
from .losses import huber_pinball, huber_quantile_loss, mae_loss
from .model import ModelConfig, forward

LOG_COLUMNS = ("epoch", "train_loss", "val_loss_q10", "val_loss_q50", "val_loss_q90", "seconds")
LOG_HEADER = "# QGW-TRAINLOG v1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    patience: int = 10
    objective: str = "quantile"  # "quantile" (Huber pinball) or "mae"
    kappa: float = 0.05
    val_taus: tuple[float, ...] = (0.1, 0.5, 0.9)
    eval_batch: int = 512

    def __post_init__(self):
        if self.objective not in ("quantile", "mae"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0

    @classmethod
    def create(cls, params, cfg: TrainConfig | None = None) -> "OptimizerState":
        cfg = cfg or TrainConfig()
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, cfg.lr, cfg.beta1,
                   cfg.beta2, cfg.eps, cfg.clip_norm)


def clip_gradients(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params: dict, grads: dict, state: OptimizerState) -> tuple[dict, OptimizerState]:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter '{name}' shape {params[name].shape}")
    grads, _ = clip_gradients(grads, state.clip_norm)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name], m[name], v[name] = p, state.m[name], state.v[name]
            continue
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** step)
        v_hat = v[name] / (1 - b2 ** step)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, step, state.lr, b1, b2, state.eps, state.clip_norm)
    return new_params, new_state


def sample_tau(rng: np.random.Generator, batch_size: int) -> np.ndarray:
    """One U[0, 1] level per batch sample."""
    return rng.random(batch_size)


def batch_loss(params, cfg: ModelConfig, tm: TransitionMatrices, x, y, mask, tau,
               objective: str = "quantile", kappa: float = 0.05, train: bool = True,
               rng: np.random.Generator | None = None) -> Tensor:
    pred = forward(params, cfg, tm, x, tau, train=train, rng=rng)
    if objective == "mae":
        return mae_loss(pred, Tensor(y), mask)
    tau_b = np.asarray(tau, dtype=np.float64).reshape((-1,) + (1,) * 3)
    return huber_quantile_loss(Tensor(y) - pred, tau_b, kappa, mask)


def evaluate_loss(params, cfg: ModelConfig, tm: TransitionMatrices, ds: WindowedDataset, tau: float,
                  objective: str = "quantile", kappa: float = 0.05, chunk: int = 512) -> float:
    """Masked mean loss over the whole dataset in eval mode."""
    total, count = 0.0, 0.0
    for i in range(0, len(ds), chunk):
        sl = slice(i, i + chunk)
        pred = forward(params, cfg, tm, ds.inputs[sl], tau).data
        m = ds.target_mask[sl]
        if objective == "mae":
            elem = np.abs(pred - ds.targets[sl])
        else:
            elem = huber_pinball(ds.targets[sl] - pred, tau, kappa).data
        total += float((elem * m).sum())
        count += float(m.sum())
    if count == 0:
        raise ValueError("validation set has no observed targets")
    return total / count


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss_q10: float
    val_loss_q50: float
    val_loss_q90: float
    seconds: float

    def to_line(self) -> str:
        return (f"{self.epoch},{self.train_loss!r},{self.val_loss_q10!r},{self.val_loss_q50!r},"
                f"{self.val_loss_q90!r},{self.seconds:.3f}")


@dataclass
class TrainLog:
    seed: int
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def losses(self) -> list[tuple[float, float, float, float]]:
        return [(r.train_loss, r.val_loss_q10, r.val_loss_q50, r.val_loss_q90) for r in self.records]

    def to_text(self) -> str:
        lines = [LOG_HEADER, f"# seed {self.seed}", ",".join(LOG_COLUMNS)]
        lines += [r.to_line() for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def train(params: dict, cfg: ModelConfig, tm: TransitionMatrices, train_ds: WindowedDataset,
          val_ds: WindowedDataset, tcfg: TrainConfig = TrainConfig(), seed: int = 0,
          on_epoch=None) -> tuple[dict, TrainLog]:
    """Minimize the masked Huber pinball loss with tau ~ U[0, 1] per sample.

    Returns the parameters of the epoch with the lowest median-level
    validation loss. With ``objective="mae"`` tau is held at 0.5 and the loss is
    plain MAE (the MC-dropout baseline).
    """
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    log = TrainLog(seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if tcfg.epochs == 0:
        return params, log
    rng = np.random.default_rng(seed)
    state = OptimizerState.create(params, tcfg)
    best, best_val, stale = params, np.inf, 0
    n = len(train_ds)
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for i in range(0, n, tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            if tcfg.objective == "mae":
                tau = np.full(len(idx), 0.5)
            else:
                tau = sample_tau(rng, len(idx))
            mask = train_ds.target_mask[idx]
            if not mask.any():
                continue
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            try:
                loss = batch_loss(leaves, cfg, tm, train_ds.inputs[idx], train_ds.targets[idx],
                                  mask, tau, tcfg.objective, tcfg.kappa, train=True, rng=rng)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(f"loss became {loss.item()}")
                backward(loss)
                grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                         for k, t in leaves.items()}
                params, state = adam_step(params, grads, state)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best, log) from exc
            total += loss.item()
            batches += 1
        if tcfg.objective == "quantile":
            vals = [evaluate_loss(params, cfg, tm, val_ds, t, tcfg.objective, tcfg.kappa, tcfg.eval_batch)
                    for t in tcfg.val_taus]
        else:  # the MAE model has no tau input; its one loss fills every column
            vals = [evaluate_loss(params, cfg, tm, val_ds, 0.5, "mae", chunk=tcfg.eval_batch)] * 3
        if not all(np.isfinite(vals)):
            raise TrainingDiverged(f"epoch {epoch}: validation loss is non-finite", best, log)
        rec = EpochRecord(epoch, total / max(batches, 1), vals[0], vals[1], vals[2],
                          time.perf_counter() - t0)
        log.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if vals[1] < best_val:
            best, best_val, stale = params, vals[1], 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale >= tcfg.patience:
                log.stopped_early = True
                break
    return best, log


def train_mc_baseline(params: dict, cfg: ModelConfig, tm: TransitionMatrices,
                      train_ds: WindowedDataset, val_ds: WindowedDataset,
                      tcfg: TrainConfig = TrainConfig(), seed: int = 0, on_epoch=None):
    """Same loop with the MAE objective and tau fixed at 0.5."""
    return train(params, cfg, tm, train_ds, val_ds, replace(tcfg, objective="mae"), seed, on_epoch)
