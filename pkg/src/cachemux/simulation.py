"""Experiment orchestration: configs, multi-trial runs, offline fits and aggregation.

Every policy in an experiment sees the same catalog, arrivals and cost draws
within a trial (paired seeds), so column differences reflect the policies
rather than sampling noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .caching import CacheState, expected_cost, optimal_cache, top_l, true_costs
from .engine import RunSpec, TrialResult, intended_costs, simulate
from .estimation import EstimatorState
from .multiplexing import SelectorPolicy, learned_choice, policy_expected_costs
from .workload import (
    POPULARITY,
    CostModel,
    QueryCatalog,
    draw_streams,
    load_trace,
    stream,
    synthetic_catalog,
)

log = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CatalogConfig(_Strict):
    kind: Literal["synthetic", "trace"] = "synthetic"
    queries: int = Field(20, ge=1)
    alpha: float = Field(0.9, ge=0)
    popularity: Literal["zipf", "power"] = "zipf"
    ratio: float = Field(100.0, gt=0)
    bernoulli_p: float = Field(0.5, ge=0, le=1)
    models: int = Field(2, ge=1)
    truth: Literal["per-query", "per-request"] = "per-query"
    path: str | None = None
    strict: bool = False
    bounds: tuple[float, float] | None = None
    # popularity of trace queries: uniform, or the ``popularity`` form with ``alpha``
    frequency: Literal["uniform", "alpha"] = "uniform"

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "trace" and not self.path:
            raise ValueError("trace catalog needs a path")
        if self.popularity == "power" and self.alpha <= 0:
            raise ValueError("power popularity needs alpha > 0")
        if self.bounds is not None and not 0 < self.bounds[0] <= self.bounds[1]:
            raise ValueError("bounds must satisfy 0 < B1 <= B2")
        return self


class SelectorConfig(_Strict):
    kind: Literal["always", "oracle", "learned", "noisy", "cascade"]
    model: int | None = Field(None, ge=0)
    accuracy: float | None = Field(None, ge=0, le=1)
    order: tuple[int, ...] | None = None

    def build(self, num_models: int) -> SelectorPolicy:
        if self.kind == "cascade":
            return SelectorPolicy.cascade(self.order or tuple(range(num_models)))
        return SelectorPolicy(self.kind, num_models, model=self.model, accuracy=self.accuracy)


class PolicyConfig(_Strict):
    name: str
    cache: Literal["lfu", "lec"] = "lec"
    selector: SelectorConfig


class TableConfig(_Strict):
    alphas: tuple[float, ...] = (0.5, 0.8)
    ratios: tuple[float, ...] = (1.5, 100.0)
    accuracies: tuple[float, ...] = (1.0,)


class ExperimentConfig(_Strict):
    """A validated experiment description.

    ``policies`` defaults to the six columns of ``preset``. ``samples`` is the
    offline training size (defaults to ``horizon``). ``accuracy`` sets the
    selector column of the synthetic preset: 1 means the learned selector
    online and a perfect selector offline.
    """

    mode: Literal["online", "offline"] = "online"
    catalog: CatalogConfig = CatalogConfig()
    capacity: int = Field(10, ge=0)
    horizon: int = Field(10000, ge=1)
    samples: int | None = Field(None, ge=1)
    trials: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    delta: float | None = Field(None, gt=0, lt=1)
    source: Literal["lcb", "plugin"] = "lcb"
    preset: Literal["synthetic", "cascade"] = "synthetic"
    accuracy: float = Field(1.0, ge=0, le=1)
    policies: tuple[PolicyConfig, ...] | None = None
    table: TableConfig = TableConfig()

    @property
    def training_size(self) -> int:
        return self.samples or self.horizon

    def resolved_policies(self) -> tuple[PolicyConfig, ...]:
        if self.policies:
            return self.policies
        return preset_policies(self.preset, self.catalog.models, self.accuracy, self.mode)


def preset_policies(preset: str, num_models: int = 2, accuracy: float = 1.0,
                    mode: str = "online") -> tuple[PolicyConfig, ...]:
    """The canonical six table columns: LFU and LEC, each with three selectors."""
    if accuracy < 1:
        sel = SelectorConfig(kind="noisy", accuracy=accuracy)
    else:
        sel = SelectorConfig(kind="oracle" if mode == "offline" else "learned")
    if preset == "synthetic":
        columns = [(f"model{k + 1}", SelectorConfig(kind="always", model=k)) for k in range(num_models)]
    elif preset == "cascade":
        columns = [("large", SelectorConfig(kind="always", model=num_models - 1)),
                   ("cascade", SelectorConfig(kind="cascade", order=tuple(range(num_models))))]
    else:
        raise ValueError(f"unknown preset {preset!r}")
    columns.append(("selector", sel))
    return tuple(PolicyConfig(name=f"{c.upper()}+{n}", cache=c, selector=s)
                 for c in ("lfu", "lec") for n, s in columns)


def build_catalog(config: CatalogConfig, seed: int, trial: int,
                  cache: dict | None = None) -> QueryCatalog:
    """The trial's catalog. Synthetic catalogs are redrawn per trial; traces load once."""
    if config.kind == "synthetic":
        cat = synthetic_catalog(config.queries, config.alpha, config.ratio, stream(seed, trial, "catalog"),
                                num_models=config.models, p=config.bernoulli_p, truth=config.truth,
                                popularity=config.popularity)
        if config.bounds is not None:
            cat = QueryCatalog(cat.frequency, cat.cost_models, bounds=config.bounds)
        return cat
    if cache is not None and "trace" in cache:
        return cache["trace"]
    probe = load_trace(config.path, bounds=config.bounds, strict=config.strict)
    freq = None
    if config.frequency == "alpha":
        freq = POPULARITY[config.popularity](probe.size, config.alpha)
    cat = load_trace(config.path, frequency=freq, bounds=config.bounds, strict=config.strict)
    if cache is not None:
        cache["trace"] = cat
    return cat


class Welford:
    """Running pointwise mean and variance of equal-length series."""

    def __init__(self):
        self.n = 0
        self.mean: np.ndarray | None = None
        self._m2: np.ndarray | None = None

    def add(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self.mean is None:
            self.mean, self._m2 = np.zeros_like(x), np.zeros_like(x)
        elif x.shape != self.mean.shape:
            raise ValueError(f"series length {x.shape} does not match {self.mean.shape}")
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self._m2 += d * (x - self.mean)

    @property
    def std(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(np.maximum(self._m2, 0.0) / (self.n - 1))


def aggregate(series) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and sample standard deviation (zero for a single series)."""
    acc = Welford()
    for s in series:
        acc.add(s)
    if acc.n == 0:
        raise ValueError("need at least one series")
    return acc.mean.copy(), acc.std


@dataclass
class RunSummary:
    name: str
    horizon: int
    trials: int
    cost_mean: np.ndarray
    cost_std: np.ndarray
    regret_mean: np.ndarray
    regret_std: np.ndarray
    final_costs: np.ndarray
    final_regrets: np.ndarray
    first: TrialResult | None = None
    suboptimality: np.ndarray | None = None

    @property
    def cumulative_cost(self) -> float:
        return float(self.cost_mean[-1])

    @property
    def cumulative_regret(self) -> float:
        return float(self.regret_mean[-1])

    def to_dict(self) -> dict:
        out = {
            "trials": self.trials,
            "horizon": self.horizon,
            "cumulative_cost_mean": self.cumulative_cost,
            "cumulative_cost_std": float(self.cost_std[-1]),
            "cumulative_regret_mean": self.cumulative_regret,
            "cumulative_regret_std": float(self.regret_std[-1]),
        }
        if self.suboptimality is not None:
            out["suboptimality_mean"] = float(self.suboptimality.mean())
            out["suboptimality_std"] = float(self.suboptimality.std(ddof=1)) if self.suboptimality.size > 1 else 0.0
        return out


class _Collector:
    def __init__(self, name: str):
        self.name = name
        self.cost, self.regret = Welford(), Welford()
        self.final_costs: list[float] = []
        self.final_regrets: list[float] = []
        self.subopt: list[float] = []
        self.first: TrialResult | None = None

    def add(self, result: TrialResult, subopt: float | None = None) -> None:
        cost, regret = result.cum_cost, result.cum_regret
        self.cost.add(cost)
        self.regret.add(regret)
        self.final_costs.append(float(cost[-1]))
        self.final_regrets.append(float(regret[-1]))
        if subopt is not None:
            self.subopt.append(subopt)
        if self.first is None:
            self.first = result

    def summary(self) -> RunSummary:
        return RunSummary(self.name, self.cost.mean.size, self.cost.n, self.cost.mean.copy(), self.cost.std,
                          self.regret.mean.copy(), self.regret.std, np.array(self.final_costs),
                          np.array(self.final_regrets), self.first,
                          np.array(self.subopt) if self.subopt else None)


TrialHook = Callable[[int, str, QueryCatalog, TrialResult], None]


def _check_policies(policies, num_models: int) -> list[tuple[str, str, SelectorPolicy]]:
    out = []
    for p in policies:
        sel = p.selector.build(num_models)
        out.append((p.name, p.cache, sel))
    names = [n for n, _, _ in out]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate policy names in {names}")
    return out


def run_online(config: ExperimentConfig, policies=None, engine: str = "fast",
               on_trial: TrialHook | None = None) -> dict[str, RunSummary]:
    """Run each policy on every trial's shared streams; returns summaries keyed by policy name."""
    policies = config.resolved_policies() if policies is None else policies
    cache: dict = {}
    resolved = _check_policies(policies, build_catalog(config.catalog, config.seed, 0, cache).num_models)
    collectors = {name: _Collector(name) for name, _, _ in resolved}
    for trial in range(config.trials):
        catalog = build_catalog(config.catalog, config.seed, trial, cache)
        streams = draw_streams(catalog, config.horizon, config.seed, trial)
        for name, rule, sel in resolved:
            spec = RunSpec(sel, rule, config.capacity, delta=config.delta, source=config.source)
            result = simulate(catalog, streams, spec, engine)
            collectors[name].add(result)
            if on_trial:
                on_trial(trial, name, catalog, result)
        log.debug("trial %d done", trial)
    return {name: c.summary() for name, c in collectors.items()}


def run_online_single(config: ExperimentConfig, cache: str = "lec", engine: str = "fast",
                      on_trial: TrialHook | None = None) -> RunSummary:
    """Online caching with the largest model only, scored against the single-model optimum."""
    memo: dict = {}
    sel_model = build_catalog(config.catalog, config.seed, 0, memo).num_models - 1
    policy = PolicyConfig(name=f"{cache.upper()}+large", cache=cache,
                          selector=SelectorConfig(kind="always", model=sel_model))
    collector = _Collector(policy.name)
    for trial in range(config.trials):
        catalog = build_catalog(config.catalog, config.seed, trial, memo)
        streams = draw_streams(catalog, config.horizon, config.seed, trial)
        spec = RunSpec(policy.selector.build(catalog.num_models), cache, config.capacity,
                       delta=config.delta, benchmark="single", source=config.source)
        result = simulate(catalog, streams, spec, engine)
        collector.add(result)
        if on_trial:
            on_trial(trial, policy.name, catalog, result)
    return collector.summary()


def run_online_joint(config: ExperimentConfig, selector: SelectorConfig | None = None, cache: str = "lec",
                     engine: str = "fast", on_trial: TrialHook | None = None) -> RunSummary:
    """Joint caching and model selection (learned selector unless another is given)."""
    selector = selector or SelectorConfig(kind="learned")
    policy = PolicyConfig(name=f"{cache.upper()}+{selector.kind}", cache=cache, selector=selector)
    return run_online(config, (policy,), engine, on_trial)[policy.name]


@dataclass
class OfflineFit:
    """What an offline run learned from its dataset."""

    cache: CacheState
    selector: SelectorPolicy
    estimator: EstimatorState
    suboptimality: float


def training_estimator(catalog: QueryCatalog, n: int, seed: int, trial: int, models: tuple[int, ...],
                       mode: str, delta: float | None = None) -> EstimatorState:
    """Fit plug-in statistics on ``n`` sampled queries, each observed on ``models``."""
    data = draw_streams(catalog, n, seed, trial, "train-queries", "train-costs")
    # the j-th arrival of q sits at slot offsets[q] + j, i.e. its stable-sorted position
    pos = np.empty(n, dtype=np.int64)
    pos[np.argsort(data.queries, kind="stable")] = np.arange(n)
    est = EstimatorState(catalog.size, catalog.num_models, catalog.bounds, mode, horizon=n, delta=delta)
    est.record_batch(data.queries, data.costs[:, pos], data.fails[:, pos], models=models)
    return est


def offline_fit(catalog: QueryCatalog, rule: str, selector: SelectorPolicy, capacity: int, n: int,
                seed: int, trial: int, delta: float | None = None, source: str = "lcb",
                benchmark: str = "joint") -> OfflineFit:
    """Build the cache and deployed selector from ``n`` training samples.

    The learned selector becomes a fixed table of plug-in argmins (ties to
    the lower index). The cache keeps the ``capacity`` best estimated scores.
    """
    if selector.multiplexes:
        mode, models = "offline-joint", tuple(range(catalog.num_models))
    else:
        mode, models = "offline-single", (selector.model if selector.kind == "always" else catalog.num_models - 1,)
    est = training_estimator(catalog, n, seed, trial, models, mode, delta)
    deployed = selector
    if selector.kind == "learned":
        deployed = SelectorPolicy.fixed(learned_choice(est.plugin_costs(), prefer_high=False), catalog.num_models)
    freq = est.frequencies()
    if rule == "lfu":
        scores = freq
    else:
        scores = freq * intended_costs(selector, est.costs(source), catalog.true_means, est.fail_rates())
    cache = CacheState(capacity, top_l(scores, capacity))
    served = policy_expected_costs(deployed, catalog)
    if benchmark == "single":
        best = optimal_cache(catalog, capacity, "single", selector.model)
        opt = expected_cost(catalog, best.entries, true_costs(catalog, "single", selector.model))
    else:
        opt = expected_cost(catalog, optimal_cache(catalog, capacity, "joint").entries, true_costs(catalog, "joint"))
    return OfflineFit(cache, deployed, est, expected_cost(catalog, cache.entries, served) - opt)


def run_offline(config: ExperimentConfig, policies=None, engine: str = "fast",
                on_trial: TrialHook | None = None) -> dict[str, RunSummary]:
    """Fit each policy offline, then deploy it frozen over ``horizon`` fresh arrivals.

    Suboptimality is exact from the catalog's true means; the cumulative
    series come from the deployed run.
    """
    policies = config.resolved_policies() if policies is None else policies
    memo: dict = {}
    resolved = _check_policies(policies, build_catalog(config.catalog, config.seed, 0, memo).num_models)
    collectors = {name: _Collector(name) for name, _, _ in resolved}
    for trial in range(config.trials):
        catalog = build_catalog(config.catalog, config.seed, trial, memo)
        streams = draw_streams(catalog, config.horizon, config.seed, trial)
        for name, rule, sel in resolved:
            fit = offline_fit(catalog, rule, sel, config.capacity, config.training_size, config.seed, trial,
                              config.delta, config.source)
            spec = RunSpec(fit.selector, rule, config.capacity, initial_cache=tuple(fit.cache.entries),
                           frozen=True)
            result = simulate(catalog, streams, spec, engine)
            result.estimator = fit.estimator.snapshot()
            collectors[name].add(result, fit.suboptimality)
            if on_trial:
                on_trial(trial, name, catalog, result)
    return {name: c.summary() for name, c in collectors.items()}


def run_experiment(config: ExperimentConfig, engine: str = "fast",
                   on_trial: TrialHook | None = None) -> dict[str, RunSummary]:
    runner = run_offline if config.mode == "offline" else run_online
    return runner(config, engine=engine, on_trial=on_trial)


@dataclass
class TableResult:
    """Final mean cumulative costs on a grid of (alpha, ratio, accuracy) rows."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def render(self, scale: float = 1e3) -> str:
        head = ["alpha", "ratio", "accuracy", *self.columns]
        lines = ["  ".join(f"{h:>13}" for h in head)]
        for r in self.rows:
            cells = [f"{r['alpha']:>13g}", f"{r['ratio']:>13g}", f"{r['accuracy']:>13g}"]
            cells += [f"{r['costs'][c] / scale:>13.2f}" for c in self.columns]
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": self.rows}


def run_table(config: ExperimentConfig, engine: str = "fast") -> TableResult:
    """Run the preset columns on every (alpha, ratio[, accuracy]) combination of ``config.table``."""
    accuracies = config.table.accuracies if config.mode == "offline" else (config.accuracy,)
    table = None
    for alpha in config.table.alphas:
        for ratio in config.table.ratios:
            for acc in accuracies:
                cat = config.catalog.model_copy(update={"alpha": alpha, "ratio": ratio})
                cfg = config.model_copy(update={"catalog": cat, "accuracy": acc})
                summaries = run_experiment(cfg, engine)
                if table is None:
                    table = TableResult(list(summaries))
                table.rows.append({"alpha": alpha, "ratio": ratio, "accuracy": acc,
                                   "costs": {k: s.cumulative_cost for k, s in summaries.items()},
                                   "stds": {k: float(s.cost_std[-1]) for k, s in summaries.items()}})
                log.info("row alpha=%g ratio=%g accuracy=%g done", alpha, ratio, acc)
    return table


@dataclass
class LowerBoundResult:
    delta_gap: float
    horizon: int
    regrets: tuple[np.ndarray, np.ndarray]

    @property
    def mean_regrets(self) -> tuple[float, float]:
        return float(self.regrets[0].mean()), float(self.regrets[1].mean())

    @property
    def max_regret(self) -> float:
        return max(self.mean_regrets)


def lower_bound_catalog(delta_gap: float, sign: int) -> QueryCatalog:
    """Two equally likely queries with costs ``1 + Bern(1/2)`` and ``1 + Bern(1/2 + sign * gap)``."""
    if not 0 <= delta_gap < 0.5:
        raise ValueError("gap must lie in [0, 1/2)")
    rows = ((CostModel.scaled_bernoulli(1.0, 0.5),), (CostModel.scaled_bernoulli(1.0, 0.5 + sign * delta_gap),))
    return QueryCatalog(np.array([0.5, 0.5]), rows, bounds=(1.0, 2.0))


def lower_bound_experiment(delta_gap: float, horizon: int, trials: int, seed: int = 0,
                           engine: str = "fast") -> LowerBoundResult:
    """Single-model online caching with one slot on both two-point instances."""
    regrets = []
    for sign in (1, -1):
        catalog = lower_bound_catalog(delta_gap, sign)
        spec = RunSpec(SelectorPolicy.always(0, 1), "lec", 1, benchmark="single")
        out = np.empty(trials)
        for trial in range(trials):
            # both instances share arrivals; cost draws differ only through the gap
            streams = draw_streams(catalog, horizon, seed, trial)
            out[trial] = simulate(catalog, streams, spec, engine).cum_regret[-1]
        regrets.append(out)
    return LowerBoundResult(delta_gap, horizon, (regrets[0], regrets[1]))
