"""Tabular frequency and cost estimators with pessimistic lower confidence bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# mode -> (multiplier, whether the horizon enters the log term)
LOG_TERMS = {
    "offline-single": (6, True),
    "online-single": (6, True),
    "offline-joint": (8, False),
    "online-joint": (8, True),
}


def log_term(mode: str, horizon: int, num_queries: int, delta: float) -> float:
    """``log(c * [horizon] * |Q| / delta)`` for the given estimator mode."""
    mult, uses_horizon = LOG_TERMS[mode]
    return math.log(mult * (horizon if uses_horizon else 1) * num_queries / delta)


@dataclass(frozen=True)
class CostEstimate:
    plugin: float
    lcb: float
    count: int


class EstimatorState:
    """Counts and cost sums for ``num_queries`` queries and ``num_models`` models.

    ``delta`` defaults to ``1 / horizon``. Failure counts are kept per model so
    that cascade fallback rates can be estimated alongside costs.
    """

    def __init__(
        self,
        num_queries: int,
        num_models: int,
        bounds: tuple[float, float],
        mode: str = "online-single",
        horizon: int = 1,
        delta: float | None = None,
    ):
        if mode not in LOG_TERMS:
            raise ValueError(f"unknown estimator mode {mode!r}")
        b1, b2 = map(float, bounds)
        if not 0 < b1 <= b2:
            raise ValueError(f"bounds must satisfy 0 < B1 <= B2, got {bounds}")
        if horizon < 1:
            raise ValueError("horizon must be positive")
        delta = 1.0 / horizon if delta is None else float(delta)
        if not 0 < delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        self.bounds = (b1, b2)
        self.mode = mode
        self.horizon = int(horizon)
        self.delta = delta
        self.total_steps = 0
        self.query_counts = np.zeros(num_queries, dtype=np.int64)
        self.obs_counts = np.zeros((num_queries, num_models), dtype=np.int64)
        self.fail_counts = np.zeros((num_queries, num_models), dtype=np.int64)
        self.cost_sums = np.zeros((num_queries, num_models))
        self.log_term = log_term(mode, self.horizon, num_queries, delta)

    @property
    def num_queries(self) -> int:
        return self.query_counts.size

    @property
    def num_models(self) -> int:
        return self.obs_counts.shape[1]

    @property
    def offline(self) -> bool:
        return self.mode.startswith("offline")

    def record_arrival(self, q: int) -> None:
        self.query_counts[q] += 1
        self.total_steps += 1

    def record_cost(self, q: int, k: int, cost: float, failed: bool = False) -> None:
        b1, b2 = self.bounds
        if not b1 <= cost <= b2:
            raise ValueError(f"cost {cost} outside bounds [{b1}, {b2}]")
        self.obs_counts[q, k] += 1
        self.cost_sums[q, k] += cost
        if failed:
            self.fail_counts[q, k] += 1

    def record_batch(self, queries: np.ndarray, costs: np.ndarray, fails: np.ndarray | None = None,
                     models: tuple[int, ...] | None = None) -> None:
        """Record ``len(queries)`` arrivals, each observing every model in ``models``.

        ``costs`` has shape ``(num_models, len(queries))``; rows outside
        ``models`` are ignored. This is the offline dataset layout.
        """
        n, Q = queries.size, self.num_queries
        models = tuple(range(self.num_models)) if models is None else models
        b1, b2 = self.bounds
        self.query_counts += np.bincount(queries, minlength=Q)
        self.total_steps += n
        for k in models:
            c = costs[k]
            if c.size and (c.min() < b1 or c.max() > b2):
                raise ValueError(f"model {k} costs outside bounds [{b1}, {b2}]")
            self.obs_counts[:, k] += np.bincount(queries, minlength=Q)
            self.cost_sums[:, k] += np.bincount(queries, weights=c, minlength=Q)
            if fails is not None:
                self.fail_counts[:, k] += np.bincount(queries, weights=fails[k], minlength=Q).astype(np.int64)

    def freq_estimate(self, q: int) -> float:
        if self.total_steps == 0:
            return 0.0
        return self.query_counts[q] / self.total_steps

    def frequencies(self) -> np.ndarray:
        if self.total_steps == 0:
            return np.zeros(self.num_queries)
        return self.query_counts / self.total_steps

    def cost_estimate(self, q: int, k: int) -> CostEstimate:
        n = int(self.obs_counts[q, k])
        b1, b2 = self.bounds
        if n == 0:
            return CostEstimate(b1, b1, 0)
        plugin = self.cost_sums[q, k] / n
        lcb = max(b1, plugin - (b2 - b1) * math.sqrt(self.log_term / (2 * n)))
        return CostEstimate(plugin, lcb, n)

    def plugin_costs(self) -> np.ndarray:
        n = self.obs_counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, self.cost_sums / np.maximum(n, 1), self.bounds[0])

    def lcb_costs(self) -> np.ndarray:
        b1, b2 = self.bounds
        n = self.obs_counts
        safe = np.maximum(n, 1)
        lcb = np.maximum(b1, self.cost_sums / safe - (b2 - b1) * np.sqrt(self.log_term / (2 * safe)))
        return np.where(n > 0, lcb, b1)

    def fail_rates(self) -> np.ndarray:
        return self.fail_counts / np.maximum(self.obs_counts, 1)

    def costs(self, source: str = "lcb") -> np.ndarray:
        if source == "lcb":
            return self.lcb_costs()
        if source == "plugin":
            return self.plugin_costs()
        raise ValueError(f"unknown estimate source {source!r}")

    def snapshot(self) -> dict:
        return {
            "mode": self.mode,
            "bounds": list(self.bounds),
            "delta": self.delta,
            "horizon": self.horizon,
            "total_steps": self.total_steps,
            "query_counts": self.query_counts.tolist(),
            "obs_counts": self.obs_counts.tolist(),
            "fail_counts": self.fail_counts.tolist(),
            "cost_sums": self.cost_sums.tolist(),
            "plugin": self.plugin_costs().tolist(),
            "lcb": self.lcb_costs().tolist(),
        }
