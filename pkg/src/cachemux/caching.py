"""Cache state, scoring rules, and offline/online cache construction.

All selections are deterministic. Among equal scores the lower query id is
kept, so eviction removes the highest id among the tied minima.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import EstimatorState
from .workload import QueryCatalog

SCORE_KINDS = ("lfu", "lec-single", "lec-joint", "gdsf-size")


@dataclass
class CacheState:
    capacity: float
    entries: list[int] = field(default_factory=list)
    sizes: np.ndarray | None = None

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("cache capacity must be non-negative")
        if self.sizes is not None:
            self.sizes = np.asarray(self.sizes, dtype=np.float64)
            if np.any(self.sizes <= 0):
                raise ValueError("query sizes must be positive")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate cache entries")
        if self.used > self.capacity:
            raise ValueError("entries exceed capacity")

    def __contains__(self, q: int) -> bool:
        return q in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def used(self) -> float:
        if self.sizes is None:
            return len(self.entries)
        return float(sum(self.sizes[q] for q in self.entries))

    def size_of(self, q: int) -> float:
        return 1.0 if self.sizes is None else float(self.sizes[q])

    def as_set(self) -> frozenset[int]:
        return frozenset(self.entries)

    def copy(self) -> "CacheState":
        return CacheState(self.capacity, list(self.entries), self.sizes)


@dataclass(frozen=True)
class ScoreFunction:
    """How a query's value to the cache is scored from frequency and cost.

    ``model`` picks the cost column for ``lec-single`` (default: last model);
    ``lec-joint`` and ``gdsf-size`` use the cheapest model.
    """

    kind: str = "lec-joint"
    source: str = "lcb"
    model: int | None = None
    sizes: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        if self.source not in ("lcb", "plugin"):
            raise ValueError(f"unknown estimate source {self.source!r}")
        if self.kind == "gdsf-size" and self.sizes is None:
            raise ValueError("gdsf-size scoring needs per-query sizes")

    def __call__(self, freq: np.ndarray, costs: np.ndarray) -> np.ndarray:
        if self.kind == "lfu":
            return np.asarray(freq, dtype=np.float64).copy()
        if self.kind == "lec-single":
            k = costs.shape[1] - 1 if self.model is None else self.model
            return freq * costs[:, k]
        best = freq * costs.min(axis=1)
        if self.kind == "gdsf-size":
            return best / self.sizes
        return best


def top_l(scores: np.ndarray, L: int) -> list[int]:
    """Ids of the ``L`` largest scores, ties to the lower id."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(scores.size), -scores))
    return sorted(order[: max(0, min(int(L), scores.size))].tolist())


def estimated_scores(state: EstimatorState, score: ScoreFunction) -> np.ndarray:
    return score(state.frequencies(), state.costs(score.source))


def offline_build_cache(state: EstimatorState, score: ScoreFunction, L: float) -> CacheState:
    scores = estimated_scores(state, score)
    if score.kind == "gdsf-size":
        return variable_size_build(scores, score.sizes, L, method="greedy")
    return CacheState(L, top_l(scores, int(L)))


def _victim(cache: CacheState, scores) -> int:
    # lowest score; among ties the highest id goes
    return min(cache.entries, key=lambda e: (scores[e], -e))


def online_consider(cache: CacheState, q: int, scores) -> CacheState:
    """Offer a just-missed query to the cache, evicting the weakest entry if it scores strictly higher.

    ``scores`` maps query id to its current score. With per-query sizes the
    weakest entries are evicted until the newcomer fits, but only if every one
    of them scores strictly below it.
    """
    if q in cache:
        return cache
    need = cache.size_of(q)
    if need > cache.capacity:
        return cache
    if cache.used + need <= cache.capacity:
        cache.entries.append(q)
        return cache
    if cache.sizes is None:
        if not cache.entries:
            return cache
        m = _victim(cache, scores)
        if scores[q] > scores[m]:
            cache.entries[cache.entries.index(m)] = q
        return cache
    victims, freed = [], cache.capacity - cache.used
    for e in sorted(cache.entries, key=lambda e: (scores[e], -e)):
        if freed >= need:
            break
        if not scores[q] > scores[e]:
            return cache
        victims.append(e)
        freed += cache.size_of(e)
    if freed < need:
        return cache
    cache.entries = [e for e in cache.entries if e not in victims] + [q]
    return cache


def true_costs(catalog: QueryCatalog, mode: str, model: int | None = None) -> np.ndarray:
    """Per-query expected cost relevant to ``mode``: one model (``single``) or the cheapest (``joint``)."""
    means = catalog.true_means
    if mode == "single":
        return means[:, means.shape[1] - 1 if model is None else model]
    if mode == "joint":
        return means.min(axis=1)
    raise ValueError(f"unknown mode {mode!r}")


def expected_cost(catalog: QueryCatalog, cached, per_query_cost: np.ndarray) -> float:
    """Population cost ``sum_q P(q) 1(q not cached) cost(q)``."""
    miss = np.ones(catalog.size, dtype=bool)
    miss[list(cached)] = False
    return float(np.dot(catalog.frequency * miss, per_query_cost))


def optimal_cache(catalog: QueryCatalog, L: int, mode: str = "joint", model: int | None = None) -> CacheState:
    scores = catalog.frequency * true_costs(catalog, mode, model)
    return CacheState(L, top_l(scores, L))


def brute_force_optimal(
    catalog: QueryCatalog, L: int, mode: str = "joint", model: int | None = None
) -> tuple[CacheState, float]:
    """Exhaustive search over all caches of at most ``L`` queries."""
    n = catalog.size
    L = min(int(L), n)
    if n > 20 or sum(math.comb(n, j) for j in range(L + 1)) > 10**6:
        raise ValueError(f"instance too large for enumeration (|Q|={n}, L={L})")
    cost = true_costs(catalog, mode, model)
    weighted = catalog.frequency * cost
    total = float(weighted.sum())
    best, best_cost = (), total
    for size in range(1, L + 1):
        for subset in itertools.combinations(range(n), size):
            c = total - sum(weighted[q] for q in subset)
            if c < best_cost - 1e-12:
                best, best_cost = subset, c
    return CacheState(L, list(best)), float(best_cost)


def variable_size_build(scores, sizes, budget: float, method: str = "greedy") -> CacheState:
    """Fill a size-``budget`` cache with per-query ``sizes``.

    ``greedy`` admits by score density (score / size) while items fit;
    ``exact`` solves the 0/1 knapsack by dynamic programming over integer sizes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("query sizes must be positive")
    if method == "greedy":
        order = np.lexsort((np.arange(scores.size), -(scores / sizes)))
        chosen, used = [], 0.0
        for q in order.tolist():
            if used + sizes[q] <= budget:
                chosen.append(q)
                used += sizes[q]
        return CacheState(budget, sorted(chosen), sizes)
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    if scores.size > 30 or np.any(sizes != np.round(sizes)):
        raise ValueError("exact build needs at most 30 queries with integer sizes")
    cap = int(math.floor(budget))
    w = sizes.astype(np.int64)
    # value[i][c]: best score using the first i queries within capacity c
    value = np.zeros((scores.size + 1, cap + 1))
    for i in range(scores.size):
        value[i + 1] = value[i]
        if w[i] <= cap:
            value[i + 1, w[i]:] = np.maximum(value[i, w[i]:], value[i, : cap + 1 - w[i]] + scores[i])
    chosen, c = [], cap
    for i in range(scores.size, 0, -1):
        if value[i, c] != value[i - 1, c]:
            chosen.append(i - 1)
            c -= w[i - 1]
    return CacheState(budget, sorted(chosen), sizes)
