"""Query universe, popularity and cost models, and seeded random streams.

Queries are plain integer ids ``0..n-1``. Models are indexed the same way;
with two models index 0 is the small model and index 1 the large one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCALED_BERNOULLI = "scaled-bernoulli"
TWO_PHASE = "two-phase"
EMPIRICAL = "empirical-trace"
CONSTANT = "constant"

TRACE_HEADER = ("query_id", "model_index", "cost")


class TraceError(ValueError):
    """Raised for malformed or out-of-range trace files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TraceExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    """A stochastic per-request cost bounded in ``[lower, upper]``.

    Use the constructors (:meth:`scaled_bernoulli`, :meth:`two_phase`,
    :meth:`empirical`, :meth:`constant`) rather than building one directly.
    """

    kind: str
    ratio: float = 0.0
    p: float = 0.0
    base: float = 0.0
    penalty: float = 0.0
    samples: tuple[float, ...] = ()
    cycle: bool = True

    @classmethod
    def scaled_bernoulli(cls, ratio: float, p: float = 0.5) -> "CostModel":
        if ratio < 0 or not 0.0 <= p <= 1.0:
            raise ValueError(f"invalid scaled-bernoulli parameters ratio={ratio}, p={p}")
        return cls(SCALED_BERNOULLI, ratio=float(ratio), p=float(p))

    @classmethod
    def two_phase(cls, base: float, penalty: float, fail_prob: float) -> "CostModel":
        if base <= 0 or penalty < 0 or not 0.0 <= fail_prob <= 1.0:
            raise ValueError(
                f"invalid two-phase parameters base={base}, penalty={penalty}, fail_prob={fail_prob}"
            )
        return cls(TWO_PHASE, base=float(base), penalty=float(penalty), p=float(fail_prob))

    @classmethod
    def empirical(cls, samples: Sequence[float], cycle: bool = True) -> "CostModel":
        values = tuple(float(s) for s in samples)
        if not values:
            raise ValueError("empirical cost model needs at least one sample")
        if min(values) <= 0:
            raise ValueError("costs must be strictly positive")
        return cls(EMPIRICAL, samples=values, cycle=cycle)

    @classmethod
    def constant(cls, value: float) -> "CostModel":
        if value <= 0:
            raise ValueError("costs must be strictly positive")
        return cls(CONSTANT, base=float(value))

    @property
    def fail_prob(self) -> float:
        return self.p if self.kind == TWO_PHASE else 0.0

    @property
    def bounds(self) -> tuple[float, float]:
        if self.kind == SCALED_BERNOULLI:
            return 1.0, 1.0 + self.ratio
        if self.kind == TWO_PHASE:
            return self.base, self.base + self.penalty
        if self.kind == EMPIRICAL:
            return min(self.samples), max(self.samples)
        return self.base, self.base

    @property
    def mean(self) -> float:
        if self.kind == SCALED_BERNOULLI:
            return 1.0 + self.ratio * self.p
        if self.kind == TWO_PHASE:
            return self.base + self.p * self.penalty
        if self.kind == EMPIRICAL:
            return math.fsum(self.samples) / len(self.samples)
        return self.base

    def draw(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` costs and the matching failure indicators.

        Failure is only ever set for two-phase models. Empirical traces are
        replayed in recorded order, cycling when ``cycle`` is set.
        """
        fails = np.zeros(n, dtype=bool)
        if self.kind == SCALED_BERNOULLI:
            hits = rng.random(n) < self.p
            return 1.0 + self.ratio * hits, fails
        if self.kind == TWO_PHASE:
            fails = rng.random(n) < self.p
            return self.base + self.penalty * fails, fails
        if self.kind == EMPIRICAL:
            if n > len(self.samples) and not self.cycle:
                raise TraceExhausted(f"trace has {len(self.samples)} samples, {n} requested")
            idx = np.arange(n) % len(self.samples)
            return np.asarray(self.samples)[idx], fails
        return np.full(n, self.base), fails


def sample_cost(model: CostModel, rng: np.random.Generator) -> float:
    costs, _ = model.draw(rng, 1)
    return float(costs[0])


def power_law_weights(n: int, alpha: float) -> np.ndarray:
    """Zipf popularity: weight of rank ``i`` proportional to ``(i + 1) ** -alpha``."""
    if n < 1:
        raise ValueError("need at least one query")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(alpha)
    return w / w.sum()


def power_distribution_weights(n: int, alpha: float) -> np.ndarray:
    """Discretized continuous power law: mass of bin ``i`` is ``((i+1)/n)**alpha - (i/n)**alpha``.

    For ``alpha < 1`` low ids are the popular ones; ``alpha = 1`` is uniform.
    Unlike Zipf, a larger ``alpha`` flattens the distribution.
    """
    if n < 1:
        raise ValueError("need at least one query")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return np.diff((np.arange(n + 1, dtype=np.float64) / n) ** float(alpha))


POPULARITY = {"zipf": power_law_weights, "power": power_distribution_weights}


def check_distribution(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size == 0:
        raise ValueError("frequency distribution must be a non-empty vector")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("frequency weights must be non-negative and sum to 1")
    return weights


def sample_query(dist: np.ndarray, rng: np.random.Generator) -> int:
    return int(sample_queries(dist, rng, 1)[0])


def sample_queries(dist: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    cdf = np.cumsum(dist)
    cdf[-1] = 1.0
    out = np.searchsorted(cdf, rng.random(n), side="right")
    # zero-weight tail entries share the final cdf value; clamp onto the last positive one
    return np.minimum(out, np.flatnonzero(dist)[-1]).astype(np.int64)


@dataclass(frozen=True)
class QueryCatalog:
    frequency: np.ndarray
    cost_models: tuple[tuple[CostModel, ...], ...]
    bounds: tuple[float, float] = None  # type: ignore[assignment]
    true_means: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        freq = check_distribution(self.frequency)
        object.__setattr__(self, "frequency", freq)
        if len(self.cost_models) != freq.size:
            raise ValueError("need one row of cost models per query")
        widths = {len(row) for row in self.cost_models}
        if len(widths) != 1 or 0 in widths:
            raise ValueError("every query needs the same, non-zero number of models")
        means = np.array([[m.mean for m in row] for row in self.cost_models])
        object.__setattr__(self, "true_means", means)
        lo = min(m.bounds[0] for row in self.cost_models for m in row)
        hi = max(m.bounds[1] for row in self.cost_models for m in row)
        if self.bounds is None:
            object.__setattr__(self, "bounds", (lo, hi))
        else:
            b1, b2 = map(float, self.bounds)
            if not 0 < b1 <= b2:
                raise ValueError(f"bounds must satisfy 0 < B1 <= B2, got {self.bounds}")
            if lo < b1 or hi > b2:
                raise ValueError(f"cost support [{lo}, {hi}] exceeds bounds [{b1}, {b2}]")
            object.__setattr__(self, "bounds", (b1, b2))

    @property
    def size(self) -> int:
        return self.frequency.size

    @property
    def num_models(self) -> int:
        return len(self.cost_models[0])

    def model(self, q: int, k: int) -> CostModel:
        return self.cost_models[q][k]


def synthetic_catalog(
    n: int,
    alpha: float,
    ratio: float,
    rng: np.random.Generator,
    num_models: int = 2,
    p: float = 0.5,
    truth: str = "per-query",
    popularity: str = "zipf",
) -> QueryCatalog:
    """Catalog with ``popularity`` weights (see ``POPULARITY``) and ``ratio * X + 1`` costs, ``X ~ Bernoulli(p)``.

    With ``truth="per-query"`` each (query, model) pair draws its own X once,
    fixing that pair's cost at 1 or ``ratio + 1``; the catalog therefore
    differs between trials. ``truth="per-request"`` redraws X on every
    request, which makes all expected costs equal.
    """
    if truth == "per-query":
        xs = rng.random((n, num_models)) < p
        rows = tuple(tuple(CostModel.scaled_bernoulli(ratio, float(x)) for x in row) for row in xs)
    elif truth == "per-request":
        rows = tuple(tuple(CostModel.scaled_bernoulli(ratio, p) for _ in range(num_models)) for _ in range(n))
    else:
        raise ValueError(f"unknown truth mode {truth!r}")
    if popularity not in POPULARITY:
        raise ValueError(f"unknown popularity form {popularity!r}")
    return QueryCatalog(POPULARITY[popularity](n, alpha), rows, bounds=(1.0, 1.0 + ratio))


def load_trace(
    path: str | Path,
    frequency: np.ndarray | None = None,
    bounds: tuple[float, float] | None = None,
    strict: bool = False,
) -> QueryCatalog:
    """Build a catalog that replays recorded per-request costs.

    ``frequency`` defaults to uniform over the trace's queries. Query ids and
    model indices must each be contiguous from zero, and every (query, model)
    pair needs at least one row.
    """
    samples: dict[tuple[int, int], list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError("empty trace file")
        if tuple(h.strip() for h in header) != TRACE_HEADER:
            raise TraceError(f"expected header {','.join(TRACE_HEADER)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise TraceError(f"expected 3 fields, got {len(row)}", line=line)
            try:
                q, k, c = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise TraceError(str(exc), line=line) from None
            if q < 0 or k < 0 or not math.isfinite(c) or c <= 0:
                raise TraceError(f"invalid observation {row}", line=line)
            if bounds is not None and not bounds[0] <= c <= bounds[1]:
                raise TraceError(f"cost {c} outside bounds {tuple(bounds)}", line=line)
            samples.setdefault((q, k), []).append(c)
    if not samples:
        raise TraceError("trace contains no observations")
    n = max(q for q, _ in samples) + 1
    m = max(k for _, k in samples) + 1
    missing = [(q, k) for q in range(n) for k in range(m) if (q, k) not in samples]
    if missing:
        raise TraceError(f"no observations for (query, model) pairs {missing[:5]}")
    rows = tuple(
        tuple(CostModel.empirical(samples[q, k], cycle=not strict) for k in range(m)) for q in range(n)
    )
    freq = np.full(n, 1.0 / n) if frequency is None else np.asarray(frequency, dtype=np.float64)
    if freq.size != n:
        raise TraceError(f"frequency has {freq.size} entries but trace has {n} queries")
    return QueryCatalog(freq, rows, bounds=bounds)


def write_trace(path: str | Path, rows: Sequence[tuple[int, int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for q, k, c in rows:
            w.writerow([q, k, repr(float(c))])


# Named sub-streams of a trial seed. A policy's choices never shift the
# randomness another component sees, so policies compare on identical draws.
STREAMS = {
    "catalog": 0,
    "queries": 1,
    "costs": 2,
    "selector": 3,
    "train-queries": 4,
    "train-costs": 5,
}


def stream(seed: int, trial: int, name: str, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(trial, STREAMS[name], *key))
    return np.random.default_rng(ss)


@dataclass
class TrialStreams:
    """Pre-drawn randomness for one trial of ``horizon`` requests.

    The ``j``-th invocation of model ``k`` on query ``q`` costs
    ``costs[k, offsets[q] + j]``; there are as many slots per query as it has
    arrivals, which is the most any run can consume.
    """

    queries: np.ndarray
    costs: np.ndarray
    fails: np.ndarray
    offsets: np.ndarray
    noise: np.ndarray
    pick: np.ndarray

    @property
    def horizon(self) -> int:
        return self.queries.size

    def slot(self, q: int, j: int) -> int:
        return int(self.offsets[q]) + j


def draw_streams(
    catalog: QueryCatalog,
    horizon: int,
    seed: int,
    trial: int,
    query_stream: str = "queries",
    cost_stream: str = "costs",
) -> TrialStreams:
    queries = sample_queries(catalog.frequency, stream(seed, trial, query_stream), horizon)
    counts = np.bincount(queries, minlength=catalog.size)
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    K = catalog.num_models
    costs = np.zeros((K, horizon))
    fails = np.zeros((K, horizon), dtype=bool)
    for q in np.flatnonzero(counts):
        lo, hi = offsets[q], offsets[q + 1]
        for k in range(K):
            model = catalog.model(q, k)
            rng = stream(seed, trial, cost_stream, int(q), k)
            # empirical replay must not fail here; exhaustion is checked against actual use
            if model.kind == EMPIRICAL:
                model = CostModel.empirical(model.samples, cycle=True)
            costs[k, lo:hi], fails[k, lo:hi] = model.draw(rng, int(hi - lo))
    sel = stream(seed, trial, "selector")
    noise = sel.random(horizon)
    pick = sel.random(horizon)
    return TrialStreams(queries, costs, fails, offsets, noise, pick)


def check_trace_usage(catalog: QueryCatalog, invocations: np.ndarray) -> None:
    """Raise if a strict empirical model was invoked more often than it has samples."""
    for q in range(catalog.size):
        for k in range(catalog.num_models):
            m = catalog.model(q, k)
            if m.kind == EMPIRICAL and not m.cycle and invocations[q, k] > len(m.samples):
                raise TraceExhausted(
                    f"query {q} model {k}: {invocations[q, k]} invocations, {len(m.samples)} samples"
                )
