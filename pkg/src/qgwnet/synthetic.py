"""Ring-graph process with skewed noise and exactly known conditional quantiles.

    x_{t+1} = level + A (x_t - level) + sigma * (E - 1),   E ~ Exp(1) i.i.d.

with ``A = neighbor_coef * mean-of-ring-neighbours + self_coef * I``. The
noise is independent of the state, so the h-step conditional quantile is
``level + A^h (x_t - level)`` plus a state-free offset: analytic for h = 1
(-log(1 - tau) - 1), Monte Carlo for longer horizons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrafficSeries
from .graph import SensorGraph


def ring_graph(n: int, radius_m: float = 5000.0) -> SensorGraph:
    angles = 2 * np.pi * np.arange(n) / n
    coords = radius_m * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    edges = [(i, (i + 1) % n, 1.0) for i in range(n)] + [((i + 1) % n, i, 1.0) for i in range(n)]
    return SensorGraph.from_edges(np.arange(n), coords, edges)


@dataclass(frozen=True)
class RingProcess:
    num_nodes: int = 20
    neighbor_coef: float = 0.6
    self_coef: float = 0.35
    sigma: float = 1.0
    level: float = 50.0

    def transition(self) -> np.ndarray:
        n = self.num_nodes
        m = np.zeros((n, n))
        for i in range(n):
            m[i, (i - 1) % n] += 0.5
            m[i, (i + 1) % n] += 0.5
        return self.neighbor_coef * m + self.self_coef * np.eye(n)

    def simulate(self, steps: int, seed: int, burn_in: int = 500) -> TrafficSeries:
        rng = np.random.default_rng(seed)
        a = self.transition()
        y = np.zeros(self.num_nodes)
        out = np.empty((steps, self.num_nodes))
        for t in range(burn_in + steps):
            y = a @ y + self.sigma * (rng.exponential(size=self.num_nodes) - 1.0)
            if t >= burn_in:
                out[t - burn_in] = y
        values = (out + self.level)[..., None].astype(np.float32)
        return TrafficSeries(values, np.ones(values.shape, dtype=bool))

    def noise_offsets(self, horizon: int, taus, draws: int = 200_000, seed: int = 12345) -> np.ndarray:
        """(horizon, len(taus)) quantiles of the accumulated noise at each step.

        Step 1 is exact; later steps are Monte Carlo. Nodes are exchangeable on
        the ring so node 0 stands in for all.
        """
        taus = np.asarray(taus, dtype=np.float64)
        out = np.empty((horizon, len(taus)))
        out[0] = self.sigma * (-np.log1p(-taus) - 1.0)
        if horizon == 1:
            return out
        a = self.transition()
        rng = np.random.default_rng(seed)
        acc = np.zeros((draws, self.num_nodes))
        for h in range(horizon):
            acc = acc @ a.T + self.sigma * (rng.exponential(size=acc.shape) - 1.0)
            if h > 0:
                out[h] = np.quantile(acc[:, 0], taus)
        return out

    def conditional_quantiles(self, last: np.ndarray, horizon: int, taus, **kw) -> np.ndarray:
        """True quantiles given the last observed state ``last`` (S, N).

        Returns (len(taus), S, horizon, N).
        """
        a = self.transition()
        dev = np.asarray(last, dtype=np.float64) - self.level
        means = []
        for _ in range(horizon):
            dev = dev @ a.T
            means.append(dev + self.level)
        means = np.stack(means, axis=1)  # (S, Q, N)
        offsets = self.noise_offsets(horizon, taus, **kw)  # (Q, L)
        return means[None] + offsets.T[:, None, :, None]
