"""Sensor graphs, random-walk transition matrices and diffusion convolution."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, concat, make_op, matmul, mul, reshape
from .errors import FormatError

GRAPH_HEADER = "QGW-GRAPH v1"


@dataclass(frozen=True)
class CSRMatrix:
    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @classmethod
    def from_triples(cls, rows, cols, vals, shape: tuple[int, int]) -> "CSRMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                i = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate entry ({rows[i]}, {cols[i]})")
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(shape, np.cumsum(indptr), cols, vals)

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.data
        return out

    def transpose(self) -> "CSRMatrix":
        return CSRMatrix.from_triples(self.indices, self.row_ids(), self.data, self.shape[::-1])

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.shape[0])
        np.add.at(out, self.row_ids(), self.data)
        return out

    def scale_rows(self, factors: np.ndarray) -> "CSRMatrix":
        return CSRMatrix(self.shape, self.indptr, self.indices, self.data * factors[self.row_ids()])

    @cached_property
    def _padded(self) -> tuple[np.ndarray, np.ndarray]:
        # rows padded to the max row length; padding slots point at column 0 with weight 0
        counts = np.diff(self.indptr)
        width = int(counts.max()) if counts.size else 0
        cols = np.zeros((self.shape[0], width), dtype=np.int64)
        vals = np.zeros((self.shape[0], width))
        slot = np.arange(self.nnz) - np.repeat(self.indptr[:-1], counts)
        cols[self.row_ids(), slot] = self.indices
        vals[self.row_ids(), slot] = self.data
        return cols, vals

    def dot(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        """Sparse @ dense, contracting the matrix columns with ``axis`` of ``x``."""
        ax = axis % x.ndim
        out_shape = list(x.shape)
        out_shape[ax] = self.shape[0]
        out = np.zeros(out_shape)
        cols, vals = self._padded
        bshape = [1] * x.ndim
        bshape[ax] = self.shape[0]
        for j in range(cols.shape[1]):
            out += np.take(x, cols[:, j], axis=ax) * vals[:, j].reshape(bshape)
        return out


@dataclass(frozen=True)
class SensorGraph:
    node_ids: np.ndarray
    coords: np.ndarray
    adjacency: CSRMatrix

    def __post_init__(self):
        n = len(self.node_ids)
        if self.coords.shape != (n, 2):
            raise ValueError(f"coords shape {self.coords.shape} does not match {n} nodes")
        if self.adjacency.shape != (n, n):
            raise ValueError(f"adjacency shape {self.adjacency.shape} does not match {n} nodes")
        w = self.adjacency.data
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("edge weights must be finite and nonnegative")
        if len(np.unique(self.node_ids)) != n:
            raise ValueError("node ids must be unique")

    @classmethod
    def from_edges(cls, node_ids, coords, edges) -> "SensorGraph":
        """``edges`` holds (src_id, dst_id, weight) triples."""
        node_ids = np.asarray(node_ids, dtype=np.int64)
        order = np.argsort(node_ids, kind="stable")
        node_ids = node_ids[order]
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)[order]
        pos = {int(k): i for i, k in enumerate(node_ids)}
        edges = list(edges)
        try:
            src = [pos[int(e[0])] for e in edges]
            dst = [pos[int(e[1])] for e in edges]
        except KeyError as exc:
            raise ValueError(f"edge references unknown node {exc.args[0]}") from None
        weights = [float(e[2]) for e in edges]
        n = len(node_ids)
        return cls(node_ids, coords, CSRMatrix.from_triples(src, dst, weights, (n, n)))

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    def edges(self) -> list[tuple[int, int, float]]:
        rows = self.adjacency.row_ids()
        return [
            (int(self.node_ids[r]), int(self.node_ids[c]), float(w))
            for r, c, w in zip(rows, self.adjacency.indices, self.adjacency.data)
        ]


@dataclass(frozen=True)
class TransitionMatrices:
    forward: CSRMatrix
    backward: CSRMatrix
    forward_t: CSRMatrix
    backward_t: CSRMatrix

    @property
    def num_nodes(self) -> int:
        return self.forward.shape[0]


def _row_normalize(m: CSRMatrix) -> CSRMatrix:
    deg = m.row_sums()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return m.scale_rows(inv)


def build_transition_matrices(g: SensorGraph) -> TransitionMatrices:
    """Forward D_O^-1 W and backward D_I^-1 W^T; zero-degree rows stay zero."""
    pf = _row_normalize(g.adjacency)
    pb = _row_normalize(g.adjacency.transpose())
    return TransitionMatrices(pf, pb, pf.transpose(), pb.transpose())


def sparse_matmul(m: CSRMatrix, m_t: CSRMatrix, x, node_axis: int = -2) -> Tensor:
    """``m @ x`` along ``node_axis``; ``m_t`` is the transpose used for the
    reverse pass."""
    x = as_tensor(x)
    ax = node_axis % x.ndim
    if x.shape[ax] != m.shape[1]:
        raise ShapeError(f"sparse_matmul: matrix {m.shape} vs node axis of {x.shape}")

    return make_op(m.dot(x.data, ax), (x,), lambda g: (m_t.dot(g, ax),), "spmm")


@dataclass
class DiffusionFilter:
    """``theta`` is K x 2 (shared across channels) or K x 2 x C_in x C_out."""

    theta: Tensor

    def __post_init__(self):
        self.theta = as_tensor(self.theta)
        if self.theta.ndim not in (2, 4) or self.theta.shape[1] != 2 or self.theta.shape[0] < 1:
            raise ValueError(f"theta must be K x 2 [x C_in x C_out], got {self.theta.shape}")

    @property
    def steps(self) -> int:
        return self.theta.shape[0]


def diffusion_powers(x, tm: TransitionMatrices, steps: int, node_axis: int = -2) -> list[Tensor]:
    """[T_0 f, T_0 b, T_1 f, T_1 b, ...] with T_{k+1} = P T_k; powers are never formed."""
    x = as_tensor(x)
    out = [x, x]
    fwd = bwd = x
    for _ in range(1, steps):
        fwd = sparse_matmul(tm.forward, tm.forward_t, fwd, node_axis)
        bwd = sparse_matmul(tm.backward, tm.backward_t, bwd, node_axis)
        out += [fwd, bwd]
    return out


def diffusion_convolution(x, tm: TransitionMatrices, filt, node_axis: int = -2) -> Tensor:
    """sum_k theta_k1 P_f^k X + theta_k2 P_b^k X, channels on the last axis.

    A 4-d theta also mixes channels: theta[k, d] is a C_in x C_out matrix.
    """
    if not isinstance(filt, DiffusionFilter):
        filt = DiffusionFilter(filt)
    x = as_tensor(x)
    ax = node_axis % x.ndim
    if x.shape[ax] != tm.num_nodes:
        raise ShapeError(f"diffusion: node axis of {x.shape} does not match N={tm.num_nodes}")
    theta = filt.theta
    terms = diffusion_powers(x, tm, filt.steps, node_axis)
    if theta.ndim == 2:
        flat = reshape(theta, (-1,))
        out = None
        for i, t in enumerate(terms):
            term = mul(t, flat[i])
            out = term if out is None else out + term
        return out
    k, _, c_in, c_out = theta.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"diffusion: input channels {x.shape[-1]} vs theta {theta.shape}")
    stacked = concat(terms, axis=-1)
    return matmul(stacked, reshape(theta, (2 * k * c_in, c_out)))


# ------------------------------------------------------------------------- io


def save_graph(path, g: SensorGraph) -> None:
    lines = [GRAPH_HEADER, f"N {g.num_nodes}"]
    for nid, (x, y) in zip(g.node_ids, g.coords):
        lines.append(f"node {int(nid)} {float(x)!r} {float(y)!r}")
    for s, d, w in g.edges():
        lines.append(f"edge {s} {d} {w!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path) -> SensorGraph:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    if not lines or lines[0].strip() != GRAPH_HEADER:
        raise FormatError(f"{path}:1: expected header '{GRAPH_HEADER}'")
    try:
        tag, count = lines[1].split()
        if tag != "N":
            raise ValueError
        n = int(count)
    except (ValueError, IndexError):
        raise FormatError(f"{path}:2: expected 'N <count>'") from None
    ids, coords, edges = [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "node" and len(parts) == 4:
                ids.append(int(parts[1]))
                coords.append((float(parts[2]), float(parts[3])))
            elif parts[0] == "edge" and len(parts) == 4:
                edges.append((int(parts[1]), int(parts[2]), float(parts[3])))
            else:
                raise ValueError
        except ValueError:
            raise FormatError(f"{path}:{lineno}: cannot parse '{line}'") from None
    if len(ids) != n:
        raise FormatError(f"{path}: header declares {n} nodes, found {len(ids)}")
    try:
        return SensorGraph.from_edges(ids, np.array(coords).reshape(-1, 2), edges)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
