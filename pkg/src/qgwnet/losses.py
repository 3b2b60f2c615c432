"""Mask-aware MAE, pinball and Huber pinball losses.

Errors follow ``u = target - prediction``: positive ``u`` means the prediction
fell short of the observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, make_op, mul, sub, sum_

DEFAULT_KAPPA = 0.05


@dataclass(frozen=True)
class LossConfig:
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")


def _check_tau(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.size and (np.any(tau < 0) or np.any(tau > 1) or not np.isfinite(tau).all()):
        raise ValueError(f"tau must lie in [0, 1], got {tau if tau.ndim == 0 else 'array'}")
    return tau


def _masked_mean(values: Tensor, mask) -> Tensor:
    if mask is None:
        mask = np.ones(values.shape)
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), values.shape)
    total = mask.sum()
    if total == 0:
        raise ValueError("mask selects no elements")
    return mul(sum_(mul(values, mask)), 1.0 / total)


def pinball(u, tau) -> Tensor:
    """Elementwise (tau - 1[u <= 0]) * u."""
    u = as_tensor(u)
    tau = _check_tau(tau)
    weight = tau - (u.data <= 0)
    return make_op(weight * u.data, (u,), lambda g: (g * weight,), "pinball")


def huber_pinball(u, tau, kappa: float) -> Tensor:
    """Elementwise |tau - 1[u <= 0]| * L_kappa(u) with L quadratic inside |u| < kappa."""
    if not kappa > 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    u = as_tensor(u)
    tau = _check_tau(tau)
    weight = np.abs(tau - (u.data <= 0))
    a = np.abs(u.data)
    inner = a < kappa
    base = np.where(inner, u.data * u.data / (2.0 * kappa), a - 0.5 * kappa)
    slope = np.where(inner, u.data / kappa, np.sign(u.data))
    return make_op(weight * base, (u,), lambda g: (g * weight * slope,), "huber_pinball")


def absolute(u) -> Tensor:
    u = as_tensor(u)
    return make_op(np.abs(u.data), (u,), lambda g: (g * np.sign(u.data),), "abs")


def mae_loss(pred, target, mask=None) -> Tensor:
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mae_loss: shapes {pred.shape} and {target.shape} differ")
    return _masked_mean(absolute(sub(pred, target)), mask)


def quantile_loss(u, tau, mask=None) -> Tensor:
    return _masked_mean(pinball(u, tau), mask)


def huber_quantile_loss(u, tau, kappa: float = DEFAULT_KAPPA, mask=None) -> Tensor:
    return _masked_mean(huber_pinball(u, tau, kappa), mask)
