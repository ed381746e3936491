"""Model-selection policies and cost realization.

Tie rules differ on purpose: the population-optimal selector sends ties to
the lower model index (the small model), while the online learned selector
sends ties to the higher index, so the large model is tried until the small
model's pessimistic estimate is strictly cheaper.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .estimation import EstimatorState
from .workload import TWO_PHASE, QueryCatalog

KINDS = ("always", "oracle", "learned", "noisy", "cascade", "fixed")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SelectorPolicy:
    kind: str
    num_models: int = 2
    model: int | None = None
    accuracy: float | None = None
    order: tuple[int, ...] | None = None
    table: tuple[int, ...] | None = None

    def __post_init__(self):
        K = self.num_models
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown selector kind {self.kind!r}")
        if K < 1:
            raise ConfigurationError("need at least one model")
        if self.kind == "always" and (self.model is None or not 0 <= self.model < K):
            raise ConfigurationError(f"always-model index {self.model} out of range for {K} models")
        if self.kind == "noisy" and (self.accuracy is None or not 0.0 <= self.accuracy <= 1.0):
            raise ConfigurationError(f"selector accuracy must lie in [0, 1], got {self.accuracy}")
        if self.kind == "cascade" and (self.order is None or sorted(self.order) != list(range(K))):
            raise ConfigurationError(f"cascade order must be a permutation of 0..{K - 1}")
        if self.kind == "fixed" and (self.table is None or not all(0 <= k < K for k in self.table)):
            raise ConfigurationError("fixed selector needs a per-query model table")

    @classmethod
    def always(cls, model: int, num_models: int = 2) -> "SelectorPolicy":
        return cls("always", num_models, model=model)

    @classmethod
    def oracle(cls, num_models: int = 2) -> "SelectorPolicy":
        return cls("oracle", num_models)

    @classmethod
    def learned(cls, num_models: int = 2) -> "SelectorPolicy":
        return cls("learned", num_models)

    @classmethod
    def noisy(cls, accuracy: float, num_models: int = 2) -> "SelectorPolicy":
        return cls("noisy", num_models, accuracy=accuracy)

    @classmethod
    def cascade(cls, order=(0, 1)) -> "SelectorPolicy":
        return cls("cascade", len(order), order=tuple(order))

    @classmethod
    def fixed(cls, table, num_models: int = 2) -> "SelectorPolicy":
        return cls("fixed", num_models, table=tuple(int(k) for k in table))

    @property
    def needs_truth(self) -> bool:
        return self.kind in ("oracle", "noisy")

    @property
    def multiplexes(self) -> bool:
        return self.kind != "always" and self.num_models > 1


@dataclass(frozen=True)
class Decision:
    model: int
    is_cascade_sequence: bool = False
    fallbacks: tuple[int, ...] = ()


def oracle_choice(truth: np.ndarray) -> np.ndarray:
    """Per-query cheapest model, ties to the lower index."""
    return np.argmin(truth, axis=1)


def learned_choice(costs: np.ndarray, prefer_high: bool) -> np.ndarray:
    if prefer_high:
        K = costs.shape[1]
        return K - 1 - np.argmin(costs[:, ::-1], axis=1)
    return np.argmin(costs, axis=1)


def wrong_model(best: int, num_models: int, u: float) -> int:
    """Uniform pick among the models other than ``best``, driven by ``u`` in [0, 1)."""
    j = min(int(u * (num_models - 1)), num_models - 2)
    return j if j < best else j + 1


def select(
    policy: SelectorPolicy,
    q: int,
    estimates: EstimatorState | None = None,
    truth: np.ndarray | None = None,
    rng=None,
    source: str = "lcb",
) -> Decision:
    """Pick the model for query ``q``.

    The learned rule uses plug-in estimates in offline mode (ties low) and
    lower confidence bounds online (ties high); ``source="plugin"`` swaps the
    online bounds for raw means. Before any cost has been
    observed online it starts on model 0.
    """
    kind = policy.kind
    if policy.needs_truth and truth is None:
        raise ConfigurationError(f"{kind} selector needs true mean costs")
    if kind == "always":
        return Decision(policy.model)
    if kind == "fixed":
        return Decision(policy.table[q])
    if kind == "cascade":
        return Decision(policy.order[0], True, policy.order[1:])
    if kind == "oracle":
        return Decision(int(np.argmin(truth[q])))
    if kind == "noisy":
        best = int(np.argmin(truth[q]))
        u, v = rng.random(), rng.random()
        if u < policy.accuracy or policy.num_models == 1:
            return Decision(best)
        return Decision(wrong_model(best, policy.num_models, v))
    if estimates is None:
        raise ConfigurationError("learned selector needs estimates")
    if estimates.offline:
        return Decision(int(np.argmin(estimates.plugin_costs()[q])))
    if estimates.obs_counts.sum() == 0:
        return Decision(0)
    est = [estimates.cost_estimate(q, k) for k in range(estimates.num_models)]
    row = np.array([e.lcb if source == "lcb" else e.plugin for e in est])
    return Decision(int(learned_choice(row[None, :], prefer_high=True)[0]))


def _realize(decision: Decision, catalog: QueryCatalog, q: int,
             draw: Callable[[int], tuple[float, bool]]) -> tuple[float, list[tuple[int, float, bool]]]:
    chain = (decision.model, *decision.fallbacks) if decision.is_cascade_sequence else (decision.model,)
    total, observed = 0.0, []
    for i, k in enumerate(chain):
        if decision.is_cascade_sequence and i < len(chain) - 1 and catalog.model(q, k).kind != TWO_PHASE:
            raise ConfigurationError(f"cascade stage model {k} for query {q} is not two-phase")
        cost, failed = draw(k)
        total += cost
        observed.append((k, cost, failed))
        if not failed:
            break
    return total, observed


def realize_cost(decision: Decision, q: int, catalog: QueryCatalog, rng: np.random.Generator):
    """Run the decision on query ``q``; returns the total cost and ``(model, cost, failed)`` observations.

    A cascade moves to the next model only when the current two-phase stage fails.
    """

    def draw(k):
        m = catalog.model(q, k)
        costs, fails = m.draw(rng, 1)
        return float(costs[0]), bool(fails[0])

    return _realize(decision, catalog, q, draw)


def cascade_expected_costs(catalog: QueryCatalog, order) -> np.ndarray:
    means = catalog.true_means
    out = np.zeros(catalog.size)
    for q in range(catalog.size):
        acc, reach = 0.0, 1.0
        for i, k in enumerate(order):
            m = catalog.model(q, k)
            if i < len(order) - 1 and m.kind != TWO_PHASE:
                raise ConfigurationError(f"cascade stage model {k} for query {q} is not two-phase")
            acc += reach * means[q, k]
            reach *= m.fail_prob
        out[q] = acc
    return out


def policy_expected_costs(policy: SelectorPolicy, catalog: QueryCatalog) -> np.ndarray:
    """Per-query expected cost of a non-adaptive selector under the catalog's true means."""
    means = catalog.true_means
    idx = np.arange(catalog.size)
    if policy.kind == "always":
        return means[:, policy.model].copy()
    if policy.kind == "oracle":
        return means.min(axis=1)
    if policy.kind == "noisy":
        K = policy.num_models
        best = means.min(axis=1)
        if K == 1:
            return best
        others = (means.sum(axis=1) - means[idx, oracle_choice(means)]) / (K - 1)
        return policy.accuracy * best + (1 - policy.accuracy) * others
    if policy.kind == "cascade":
        return cascade_expected_costs(catalog, policy.order)
    if policy.kind == "fixed":
        return means[idx, np.asarray(policy.table)]
    raise ConfigurationError("learned selector has no fixed expected cost")


def always_model_gaps(catalog: QueryCatalog) -> tuple[float, float]:
    """Excess population cost of always-small and always-large over the per-query cheaper model (no cache)."""
    if catalog.num_models != 2:
        raise ConfigurationError("gap is defined for two models")
    small, large = catalog.true_means[:, 0], catalog.true_means[:, 1]
    P = catalog.frequency
    return float(np.dot(P, np.maximum(0.0, small - large))), float(np.dot(P, np.maximum(0.0, large - small)))
