"""Dilated causal convolutions and the tanh/sigmoid gated unit."""

from __future__ import annotations

from collections.abc import Sequence

from .autodiff import ShapeError, Tensor, as_tensor, conv1d_dilated, mul, sigmoid, tanh


def dilated_causal_conv(x, w, dilation: int, axis: int = -2) -> Tensor:
    """``y[t] = sum_j w[j] x[t - j*d]`` without padding.

    ``x`` is (..., time, ..., C_in) with time on ``axis``; ``w`` is
    (kernel_size, C_in, C_out). The output is shorter by ``d * (k - 1)`` steps.
    """
    return conv1d_dilated(x, w, dilation, axis)


def gated_activation(a, b_in) -> Tensor:
    a, b_in = as_tensor(a), as_tensor(b_in)
    if a.shape != b_in.shape:
        raise ShapeError(f"gated_activation: shapes {a.shape} and {b_in.shape} differ")
    return mul(tanh(a), sigmoid(b_in))


def receptive_field(kernel_size: int, dilations: Sequence[int]) -> int:
    if any(d < 1 for d in dilations):
        raise ValueError(f"dilations must all be >= 1, got {list(dilations)}")
    return 1 + (kernel_size - 1) * sum(dilations)
