"""Quantile Graph WaveNet: gated TCN + diffusion blocks conditioned on a quantile level.

Tensors inside the network are laid out (batch, time, node, channel). The
input window has ``input_len`` steps; the dilation stack must consume them
exactly so the last block leaves one time step, from which the head emits all
``horizon * channels`` outputs per node.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, dropout, relu, reshape, transpose
from .errors import FormatError
from .graph import TransitionMatrices, diffusion_convolution
from .normal import norm_ppf
from .temporal import dilated_causal_conv, gated_activation, receptive_field

CKPT_HEADER = "QGW-CKPT v1"

ModelParams = dict  # name -> float64 ndarray, insertion-ordered


@dataclass(frozen=True)
class ModelConfig:
    input_len: int
    horizon: int
    channels: int
    num_nodes: int
    dilations: tuple[int, ...]
    residual_channels: int = 16
    dilation_channels: int = 16
    skip_channels: int = 32
    end_channels: int = 32
    diffusion_steps: int = 2
    kernel_size: int = 2
    dropout: float = 0.0
    n_tau: int = 16
    kappa: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))

    def problems(self) -> list[str]:
        out = []
        if any(d < 1 for d in self.dilations) or not self.dilations:
            out.append(f"dilations must be a nonempty list of values >= 1, got {list(self.dilations)}")
        elif receptive_field(self.kernel_size, self.dilations) != self.input_len:
            out.append(
                f"receptive field {receptive_field(self.kernel_size, self.dilations)} "
                f"!= input_len {self.input_len}"
            )
        if self.kernel_size < 1:
            out.append(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.horizon < 1:
            out.append(f"horizon must be >= 1, got {self.horizon}")
        if self.diffusion_steps < 1:
            out.append(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")
        if not 0 <= self.dropout < 1:
            out.append(f"dropout must satisfy 0 <= p < 1, got {self.dropout}")
        if not self.kappa > 0:
            out.append(f"kappa must be > 0, got {self.kappa}")
        for name in ("channels", "num_nodes", "residual_channels", "dilation_channels",
                     "skip_channels", "end_channels", "n_tau"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        return out

    def validate(self) -> "ModelConfig":
        bad = self.problems()
        if bad:
            raise ValueError("invalid model config: " + "; ".join(bad))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def layer_lengths(cfg: ModelConfig) -> list[int]:
    """Temporal length after the input projection and after every block."""
    lengths = [cfg.input_len]
    for d in cfg.dilations:
        lengths.append(lengths[-1] - d * (cfg.kernel_size - 1))
    return lengths


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    r, dc, s, e = cfg.residual_channels, cfg.dilation_channels, cfg.skip_channels, cfg.end_channels
    shapes = {
        "in.w": (cfg.channels, r),
        "in.b": (r,),
        "tau.w": (cfg.n_tau, r),
        "tau.b": (r,),
    }
    for i in range(len(cfg.dilations)):
        shapes.update({
            f"l{i}.filter.w": (cfg.kernel_size, r, dc),
            f"l{i}.filter.b": (dc,),
            f"l{i}.gate.w": (cfg.kernel_size, r, dc),
            f"l{i}.gate.b": (dc,),
            f"l{i}.skip.w": (dc, s),
            f"l{i}.skip.b": (s,),
            f"l{i}.gconv.theta": (cfg.diffusion_steps, 2, dc, r),
            f"l{i}.gconv.b": (r,),
        })
    shapes.update({
        "end1.w": (s, e),
        "end1.b": (e,),
        "end2.w": (e, cfg.horizon * cfg.channels),
        "end2.b": (cfg.horizon * cfg.channels,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Weights ~ U(-a, a), a = sqrt(1 / fan_in), where fan_in counts every input
    feeding one output unit; biases start at zero."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = np.sqrt(1.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def cosine_embedding(tau, n_tau: int) -> np.ndarray:
    """cos(pi * j * tau) for j = 0..n_tau-1; one row per tau."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if np.any((tau < 0) | (tau > 1)) or not np.isfinite(tau).all():
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return np.cos(np.pi * tau[:, None] * np.arange(n_tau)[None, :])


def embed_tau(params, tau, n_tau: int) -> tuple[np.ndarray, Tensor]:
    """Raw cosine features and their ReLU(affine) projection to the hidden width."""
    raw = cosine_embedding(tau, n_tau)
    proj = relu(Tensor(raw) @ as_tensor(params["tau.w"]) + as_tensor(params["tau.b"]))
    return raw, proj


class PassCounter:
    """Counts forward passes; predict/MC-dropout cost is measured against it."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def bump(self) -> None:
        with self._lock:
            self.count += 1

    def reset(self) -> None:
        with self._lock:
            self.count = 0


forward_passes = PassCounter()


def forward(params, cfg: ModelConfig, tm: TransitionMatrices, x, tau, train: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """One pass: x is (P, N, C) or (B, P, N, C) in normalized units, tau a level
    or one level per batch row. Returns (Q, N, C) or (B, Q, N, C)."""
    forward_passes.bump()
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (cfg.input_len, cfg.num_nodes, cfg.channels):
        raise ValueError(
            f"input shape {x.shape} does not match (B, {cfg.input_len}, {cfg.num_nodes}, {cfg.channels})"
        )
    b = x.shape[0]
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    if tau.size == 1:
        tau = np.repeat(tau, b)
    if tau.size != b:
        raise ValueError(f"got {tau.size} tau levels for a batch of {b}")
    p = {k: as_tensor(v) for k, v in params.items()}

    h = x @ p["in.w"] + p["in.b"]
    _, emb = embed_tau(p, tau, cfg.n_tau)
    h = h * reshape(emb, (b, 1, 1, cfg.residual_channels))

    skip = None
    for i, d in enumerate(cfg.dilations):
        residual = h
        f = dilated_causal_conv(h, p[f"l{i}.filter.w"], d, axis=-3) + p[f"l{i}.filter.b"]
        g = dilated_causal_conv(h, p[f"l{i}.gate.w"], d, axis=-3) + p[f"l{i}.gate.b"]
        z = dropout(gated_activation(f, g), cfg.dropout, train, rng)
        s = z[:, -1:] @ p[f"l{i}.skip.w"] + p[f"l{i}.skip.b"]
        skip = s if skip is None else skip + s
        y = diffusion_convolution(z, tm, p[f"l{i}.gconv.theta"], node_axis=-2) + p[f"l{i}.gconv.b"]
        h = y + residual[:, -y.shape[1]:]

    out = relu(skip)
    out = relu(out @ p["end1.w"] + p["end1.b"])
    out = out @ p["end2.w"] + p["end2.b"]  # (B, 1, N, Q*C)
    out = reshape(out, (b, cfg.num_nodes, cfg.horizon, cfg.channels))
    out = transpose(out, (0, 2, 1, 3))
    return out[0] if single else out


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class QuantileForecast:
    """``values[i]`` holds the taus[i]-quantile forecast, shape (..., Q, N, C)."""

    taus: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        if len(self.taus) != len(self.values):
            raise ValueError("one value slice per tau level is required")
        if np.any(np.diff(self.taus) <= 0):
            raise ValueError(f"tau levels must be strictly increasing, got {self.taus}")

    def at(self, tau: float) -> np.ndarray:
        hit = np.flatnonzero(np.isclose(self.taus, tau, rtol=0, atol=1e-12))
        if not hit.size:
            raise KeyError(f"tau {tau} not in forecast levels {self.taus}")
        return self.values[hit[0]]


def predict_quantiles(params, cfg: ModelConfig, tm: TransitionMatrices, x, taus,
                      stats: NormStats | None = None) -> QuantileForecast:
    """One eval-mode forward pass per requested level."""
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    if taus.size == 0 or np.any(np.diff(taus) <= 0):
        raise ValueError(f"tau levels must be sorted strictly increasing, got {list(taus)}")
    slices = []
    for t in taus:
        out = forward(params, cfg, tm, x, t).data
        slices.append(stats.denormalize(out) if stats is not None else out)
    return QuantileForecast(taus, np.stack(slices))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("QGW_THREADS", "1")))
    except ValueError:
        return 1


def mc_dropout_forward(params, cfg: ModelConfig, tm: TransitionMatrices, x, passes: int,
                       seed: int, stats: NormStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased variance over ``passes`` dropout-active passes.

    The tau input is held at 0.5, matching how the MAE baseline is trained.
    Each pass draws from its own child seed, so results do not depend on the
    number of worker threads.
    """
    if passes < 2:
        raise ValueError(f"MC dropout needs at least 2 passes, got {passes}")
    seeds = np.random.SeedSequence(seed).spawn(passes)

    def one(ss):
        out = forward(params, cfg, tm, x, 0.5, train=True, rng=np.random.default_rng(ss)).data
        return stats.denormalize(out) if stats is not None else out

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        draws = np.stack(list(pool.map(one, seeds)))
    return draws.mean(axis=0), draws.var(axis=0, ddof=1)


def gaussian_quantile(mean, var, tau) -> np.ndarray:
    return np.asarray(mean) + norm_ppf(tau) * np.sqrt(np.asarray(var))


def gaussian_interval(mean, var, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Central interval mean +- z_{(1+gamma)/2} * std."""
    if not 0 < gamma < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {gamma}")
    z = norm_ppf((1 + gamma) / 2)
    std = np.sqrt(np.asarray(var))
    return np.asarray(mean) - z * std, np.asarray(mean) + z * std


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(path, params: ModelParams) -> None:
    lines = [CKPT_HEADER, f"params {len(params)}"]
    offset = 0
    for name, arr in params.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        shape = ",".join(str(s) for s in np.shape(arr)) or "-"
        lines.append(f"{name} {shape} {offset}")
        offset += int(np.size(arr)) * 8
    lines.append("end")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.values())
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + payload)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        text = raw[pos:end].decode("utf-8", errors="replace")
        start, pos = pos, end + 1
        return text, start

    head, at = line()
    if head != CKPT_HEADER:
        raise FormatError(f"{path}: expected '{CKPT_HEADER}' at byte {at}")
    count_line, at = line()
    parts = count_line.split()
    if len(parts) != 2 or parts[0] != "params" or not parts[1].isdigit():
        raise FormatError(f"{path}: expected 'params <n>' at byte {at}")
    count = int(parts[1])
    manifest = []
    for _ in range(count):
        text, at = line()
        try:
            name, shape, offset = text.split()
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            manifest.append((name, dims, int(offset)))
        except ValueError:
            raise FormatError(f"{path}: bad manifest entry at byte {at}") from None
    end, at = line()
    if end != "end":
        raise FormatError(f"{path}: expected 'end' at byte {at}")
    payload = raw[pos:]
    params = {}
    for name, dims, offset in manifest:
        n = int(np.prod(dims)) if dims else 1
        if offset + 8 * n > len(payload):
            raise FormatError(f"{path}: payload truncated at byte {pos + len(payload)}, "
                              f"'{name}' needs bytes up to {pos + offset + 8 * n}")
        params[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(dims)
    return params
