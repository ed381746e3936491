"""Single-trial execution of a (cache rule, selector) pair over pre-drawn streams.

Two interchangeable engines run the same loop: :func:`simulate_reference`
composes the estimator, cache and selector objects directly and can report
every step; :func:`simulate_fast` runs the compiled kernel. Given the same
:class:`~cachemux.workload.TrialStreams` they produce identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import _kernel
from .caching import CacheState, expected_cost, online_consider, optimal_cache, true_costs
from .estimation import EstimatorState, log_term
from .multiplexing import (
    ConfigurationError,
    SelectorPolicy,
    _realize,
    learned_choice,
    oracle_choice,
    policy_expected_costs,
    select,
)
from .workload import QueryCatalog, TrialStreams, check_trace_usage

CACHE_RULES = ("lfu", "lec")


@dataclass(frozen=True)
class RunSpec:
    """What to run for one trial.

    ``benchmark`` chooses the comparator for regret: the joint optimum over
    all models, or the single-model optimum of an ``always`` selector's model.
    ``frozen`` replays a fixed cache and selector without learning (offline
    deployment). ``oracle_scores`` ranks cache entries by true frequency and
    cost instead of estimates.
    """

    selector: SelectorPolicy
    cache: str = "lec"
    capacity: int = 0
    mode: str | None = None
    delta: float | None = None
    initial_cache: tuple[int, ...] = ()
    frozen: bool = False
    oracle_scores: bool = False
    benchmark: str = "joint"
    source: str = "lcb"

    def __post_init__(self):
        if self.source not in ("lcb", "plugin"):
            raise ConfigurationError(f"unknown estimate source {self.source!r}")
        if self.cache not in CACHE_RULES:
            raise ConfigurationError(f"unknown cache rule {self.cache!r}")
        if self.capacity < 0:
            raise ConfigurationError("cache capacity must be non-negative")
        if len(self.initial_cache) > self.capacity:
            raise ConfigurationError("initial cache exceeds capacity")
        if self.benchmark == "single" and self.selector.kind != "always":
            raise ConfigurationError("single-model benchmark needs an always-model selector")

    @property
    def estimator_mode(self) -> str:
        if self.mode is not None:
            return self.mode
        return "online-joint" if self.selector.multiplexes else "online-single"


@dataclass(frozen=True)
class StepRecord:
    t: int
    query: int
    hit: bool
    model: int | None
    realized_cost: float
    expected_step_cost: float
    optimal_step_cost: float

    @property
    def regret_increment(self) -> float:
        return self.expected_step_cost - self.optimal_step_cost


@dataclass
class TrialResult:
    query: np.ndarray
    hit: np.ndarray
    model: np.ndarray
    realized: np.ndarray
    expected: np.ndarray
    optimal_cost: float
    final_cache: tuple[int, ...] = ()
    estimator: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.query.size

    @property
    def cum_cost(self) -> np.ndarray:
        return np.cumsum(self.realized)

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.expected - self.optimal_cost)

    def records(self) -> Iterator[StepRecord]:
        for t in range(self.horizon):
            m = int(self.model[t])
            yield StepRecord(t + 1, int(self.query[t]), bool(self.hit[t]), None if m < 0 else m,
                             float(self.realized[t]), float(self.expected[t]), self.optimal_cost)


def optimal_step_cost(catalog: QueryCatalog, spec: RunSpec) -> float:
    if spec.benchmark == "single":
        costs = true_costs(catalog, "single", spec.selector.model)
        return expected_cost(catalog, optimal_cache(catalog, spec.capacity, "single", spec.selector.model).entries, costs)
    costs = true_costs(catalog, "joint")
    return expected_cost(catalog, optimal_cache(catalog, spec.capacity, "joint").entries, costs)


def true_fail_probs(catalog: QueryCatalog) -> np.ndarray:
    return np.array([[m.fail_prob for m in row] for row in catalog.cost_models])


def _static_costs(catalog: QueryCatalog, selector: SelectorPolicy) -> np.ndarray:
    if selector.kind == "learned":
        return np.zeros(catalog.size)
    return policy_expected_costs(selector, catalog)


def intended_costs(selector: SelectorPolicy, costs: np.ndarray, truth: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Estimated per-query cost of the model(s) the selector means to use."""
    idx = np.arange(costs.shape[0])
    kind = selector.kind
    if kind == "always":
        return costs[:, selector.model]
    if kind == "learned":
        return costs.min(axis=1)
    if kind in ("oracle", "noisy"):
        return costs[idx, oracle_choice(truth)]
    if kind == "fixed":
        return costs[idx, np.asarray(selector.table)]
    acc, reach = np.zeros(costs.shape[0]), np.ones(costs.shape[0])
    for k in selector.order:
        acc = acc + reach * costs[:, k]
        reach = reach * rates[:, k]
    return acc


class _Uniforms:
    """Replays the pre-drawn selector uniforms for one step."""

    def __init__(self, *values: float):
        self._values = list(values)

    def random(self) -> float:
        return self._values.pop(0)


def simulate_reference(
    catalog: QueryCatalog,
    streams: TrialStreams,
    spec: RunSpec,
    on_step: Callable[[int, int, bool, CacheState, EstimatorState], None] | None = None,
) -> TrialResult:
    """Run one trial step by step with the estimator, cache and selector objects."""
    Q, K = catalog.true_means.shape
    if spec.selector.num_models != K:
        raise ConfigurationError(f"selector expects {spec.selector.num_models} models, catalog has {K}")
    T = streams.horizon
    truth = catalog.true_means
    P = catalog.frequency
    selector = spec.selector
    est = EstimatorState(Q, K, catalog.bounds, spec.estimator_mode, horizon=T, delta=spec.delta)
    cache = CacheState(spec.capacity, list(spec.initial_cache))
    static = _static_costs(catalog, selector)
    fail_true = true_fail_probs(catalog)
    used = np.zeros((Q, K), dtype=np.int64)

    hit = np.zeros(T, dtype=bool)
    model = np.full(T, -1, dtype=np.int64)
    realized = np.zeros(T)
    expected = np.zeros(T)

    for t in range(T):
        q = int(streams.queries[t])
        if selector.kind == "learned":
            if est.obs_counts.sum() == 0:
                choice = np.zeros(Q, dtype=np.int64)
            else:
                choice = learned_choice(est.costs(spec.source), prefer_high=True)
            step_costs = truth[np.arange(Q), choice]
        else:
            step_costs = static
        expected[t] = expected_cost(catalog, cache.entries, step_costs)

        if not spec.frozen:
            est.record_arrival(q)
        if q in cache:
            hit[t] = True
            if on_step:
                on_step(t, q, True, cache, est)
            continue

        decision = select(selector, q, est, truth, rng=_Uniforms(streams.noise[t], streams.pick[t]),
                          source=spec.source)

        def draw(k):
            pos = streams.slot(q, int(used[q, k]))
            used[q, k] += 1
            return float(streams.costs[k, pos]), bool(streams.fails[k, pos])

        total, observed = _realize(decision, catalog, q, draw)
        model[t] = decision.model
        realized[t] = total
        if spec.frozen:
            continue
        for k, c, failed in observed:
            est.record_cost(q, k, c, failed)

        if spec.oracle_scores:
            freq, costs, rates = P, truth, fail_true
        else:
            freq, costs, rates = est.frequencies(), est.costs(spec.source), est.fail_rates()
        scores = freq * intended_costs(selector, costs, truth, rates) if spec.cache == "lec" else freq
        online_consider(cache, q, scores)
        if on_step:
            on_step(t, q, False, cache, est)

    check_trace_usage(catalog, used)
    return TrialResult(streams.queries.copy(), hit, model, realized, expected,
                       optimal_step_cost(catalog, spec), tuple(sorted(cache.entries)), est.snapshot())


def simulate_fast(catalog: QueryCatalog, streams: TrialStreams, spec: RunSpec) -> TrialResult:
    """Compiled equivalent of :func:`simulate_reference` (no per-step hooks)."""
    Q, K = catalog.true_means.shape
    selector = spec.selector
    if selector.num_models != K:
        raise ConfigurationError(f"selector expects {selector.num_models} models, catalog has {K}")
    T = streams.horizon
    b1, b2 = catalog.bounds
    mode = spec.estimator_mode
    delta = 1.0 / T if spec.delta is None else spec.delta
    truth = catalog.true_means
    order = np.asarray(selector.order if selector.kind == "cascade" else (0,), dtype=np.int64)
    table = np.asarray(selector.table if selector.kind == "fixed" else np.zeros(Q), dtype=np.int64)
    out = _kernel.run_trial(
        streams.queries, streams.costs, streams.fails, streams.offsets, streams.noise, streams.pick,
        catalog.frequency, truth, true_fail_probs(catalog), _static_costs(catalog, selector),
        oracle_choice(truth).astype(np.int64),
        _kernel.SELECTOR_CODES[selector.kind], int(selector.model or 0), float(selector.accuracy or 0.0),
        order, table,
        spec.cache == "lec", int(spec.capacity), np.asarray(spec.initial_cache, dtype=np.int64),
        spec.frozen, spec.oracle_scores,
        float(b1), float(b2), log_term(mode, T, Q, delta) if spec.source == "lcb" else 0.0,
    )
    hit, model, realized, expected, counts, obs, fcnt, sums, entries, used = out
    check_trace_usage(catalog, used)
    est = EstimatorState(Q, K, catalog.bounds, mode, horizon=T, delta=spec.delta)
    if not spec.frozen:
        est.total_steps = T
        est.query_counts, est.obs_counts, est.fail_counts, est.cost_sums = counts, obs, fcnt, sums
    return TrialResult(streams.queries.copy(), hit, model, realized, expected,
                       optimal_step_cost(catalog, spec), tuple(sorted(entries.tolist())), est.snapshot())


ENGINES = {"python": simulate_reference, "fast": simulate_fast}


def simulate(catalog: QueryCatalog, streams: TrialStreams, spec: RunSpec, engine: str = "fast") -> TrialResult:
    return ENGINES[engine](catalog, streams, spec)
