import numpy as np
import pytest
from pydantic import ValidationError

from cachemux.simulation import (
    CatalogConfig,
    ExperimentConfig,
    PolicyConfig,
    SelectorConfig,
    aggregate,
    lower_bound_experiment,
    offline_fit,
    preset_policies,
    run_offline,
    run_online,
    run_online_joint,
    run_online_single,
    run_table,
)
from cachemux.multiplexing import SelectorPolicy
from cachemux.workload import synthetic_catalog, stream


def small(**kw):
    base = dict(capacity=4, horizon=500, trials=3, catalog=CatalogConfig(queries=10))
    base.update(kw)
    return ExperimentConfig(**base)


class TestAggregate:
    def test_single_series(self):
        mean, std = aggregate([np.array([1.0, 2.0])])
        np.testing.assert_array_equal(mean, [1.0, 2.0])
        np.testing.assert_array_equal(std, [0.0, 0.0])

    def test_two_constant_series(self):
        mean, std = aggregate([np.full(3, 2.0), np.full(3, 4.0)])
        np.testing.assert_allclose(mean, 3.0)
        np.testing.assert_allclose(std, np.sqrt(2.0))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        series = [rng.normal(size=20) for _ in range(100)]
        a = aggregate(series)
        b = aggregate(series[::-1])
        np.testing.assert_allclose(a[0], b[0])
        np.testing.assert_allclose(a[1], b[1])

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            aggregate([np.zeros(3), np.zeros(4)])

    def test_matches_numpy(self):
        rng = np.random.default_rng(1)
        series = rng.normal(size=(7, 5))
        mean, std = aggregate(series)
        np.testing.assert_allclose(mean, series.mean(axis=0))
        np.testing.assert_allclose(std, series.std(axis=0, ddof=1))


class TestConfig:
    def test_defaults_mirror_synthetic_setup(self):
        cfg = ExperimentConfig()
        assert (cfg.catalog.queries, cfg.catalog.alpha, cfg.capacity) == (20, 0.9, 10)
        assert (cfg.catalog.ratio, cfg.horizon, cfg.trials) == (100.0, 10000, 100)
        assert [p.name for p in cfg.resolved_policies()] == [
            "LFU+model1", "LFU+model2", "LFU+selector", "LEC+model1", "LEC+model2", "LEC+selector"]

    @pytest.mark.parametrize("kw", [{"capacity": -1}, {"accuracy": 1.5}, {"trials": 0}, {"bogus": 1},
                                    {"delta": 1.0}])
    def test_range_errors(self, kw):
        with pytest.raises(ValidationError):
            ExperimentConfig(**kw)

    def test_trace_needs_path(self):
        with pytest.raises(ValidationError):
            CatalogConfig(kind="trace")

    def test_cascade_preset(self):
        names = [p.name for p in preset_policies("cascade")]
        assert names == ["LFU+large", "LFU+cascade", "LFU+selector", "LEC+large", "LEC+cascade", "LEC+selector"]

    def test_noisy_column_below_full_accuracy(self):
        sel = preset_policies("synthetic", accuracy=0.8)[-1].selector
        assert (sel.kind, sel.accuracy) == ("noisy", 0.8)


class TestOnline:
    def test_summary_shapes(self):
        out = run_online(small())
        assert len(out) == 6
        for s in out.values():
            assert s.cost_mean.shape == (500,)
            assert s.trials == 3
            assert np.all(np.diff(s.cost_mean) >= 0)
            assert np.all(np.diff(s.regret_mean) >= -1e-9)

    def test_policies_share_arrivals(self):
        out = run_online(small())
        queries = {name: s.first.query.tobytes() for name, s in out.items()}
        assert len(set(queries.values())) == 1

    def test_single_model_run(self):
        s = run_online_single(small(catalog=CatalogConfig(queries=10, models=1)))
        assert s.name == "LEC+large"
        assert s.cumulative_regret >= 0

    def test_joint_run(self):
        s = run_online_joint(small())
        assert s.name == "LEC+learned"

    def test_engines_agree(self):
        a = run_online(small(), engine="python")
        b = run_online(small(), engine="fast")
        for name in a:
            np.testing.assert_allclose(a[name].cost_mean, b[name].cost_mean)

    def test_deterministic(self):
        a = run_online(small(), engine="fast")
        b = run_online(small(), engine="fast")
        for name in a:
            assert a[name].cost_mean.tobytes() == b[name].cost_mean.tobytes()

    def test_regret_growth_sublinear(self):
        # per-step regret shrinks as the estimates settle
        cfg = small(horizon=20000, trials=20, catalog=CatalogConfig(queries=10, models=1, ratio=4.0))
        s = run_online_single(cfg)
        r = s.regret_mean
        assert r[-1] <= 2.5 * r[4999] + 1e-9


class TestOffline:
    def test_suboptimality_nonnegative(self):
        out = run_offline(small(mode="offline"))
        for s in out.values():
            assert s.suboptimality.shape == (3,)
            assert np.all(s.suboptimality >= -1e-9)

    def test_learned_selector_becomes_table(self):
        cat = synthetic_catalog(10, 0.9, 100, stream(0, 0, "catalog"))
        fit = offline_fit(cat, "lec", SelectorPolicy.learned(), 4, 5000, 0, 0)
        assert fit.selector.kind == "fixed"
        seen = fit.estimator.obs_counts[:, 0] > 0
        np.testing.assert_array_equal(np.asarray(fit.selector.table)[seen], cat.true_means[seen].argmin(axis=1))

    def test_more_data_helps(self):
        wins = 0
        for trial in range(50):
            cat = synthetic_catalog(20, 0.9, 100, stream(0, trial, "catalog"))
            pol = SelectorPolicy.learned()
            small_n = offline_fit(cat, "lec", pol, 10, 10**3, 0, trial).suboptimality
            large_n = offline_fit(cat, "lec", pol, 10, 10**6, 0, trial).suboptimality
            wins += large_n <= small_n + 1e-12
        assert wins >= 45


class TestLowerBound:
    def test_positive_regret(self):
        res = lower_bound_experiment(0.2, 5000, 100)
        assert res.mean_regrets[0] > 0

    def test_zero_gap_symmetric(self):
        res = lower_bound_experiment(0.0, 2000, 20)
        np.testing.assert_array_equal(res.regrets[0], res.regrets[1])

    def test_sqrt_scaling_reported(self):
        res = lower_bound_experiment(10000 ** -0.5, 10000, 30)
        assert res.max_regret / np.sqrt(10000) > 0


class TestTable:
    def test_grid_shape(self):
        cfg = small(table={"alphas": (0.5, 0.8), "ratios": (100.0,)}, trials=2)
        table = run_table(cfg)
        assert len(table.rows) == 2
        assert len(table.columns) == 6
        text = table.render()
        assert len(text.strip().splitlines()) == 3

    def test_offline_grid_includes_accuracies(self):
        cfg = small(mode="offline", trials=2, table={"alphas": (0.5,), "ratios": (100.0,), "accuracies": (0.8, 1.0)})
        assert [r["accuracy"] for r in run_table(cfg).rows] == [0.8, 1.0]

    def test_custom_policies(self):
        pol = (PolicyConfig(name="A", cache="lfu", selector=SelectorConfig(kind="always", model=1)),)
        assert list(run_online(small(policies=pol))) == ["A"]
