import numpy as np
import pandas as pd
import pytest

from pseudostrata.simulation import (APPLICATION_LEVELS, TRUE_BETA, LabeledDataset, Population, SimulationConfig,
                                     classification_accuracy, failure_counts, format_table, generate,
                                     generate_application, oracle_policy, policy_revenue, run_experiment, summarize_estimands,
                                     summarize_methods)

from oracles import gauss_mc_mean, multinomial_probs


class TestPopulation:
    @pytest.mark.parametrize("eta", [0.0, 0.25, -1.0])
    def test_proportions_at_origin(self, eta):
        pop = Population("exp", eta=eta)
        np.testing.assert_allclose(pop.strata(np.zeros((1, 2)))[0],
                                   multinomial_probs(0.4, -0.3, eta), rtol=1e-13)

    def test_propensity(self):
        pop = Population("exp", delta=0.5)
        x = np.array([[1.0, -0.2]])
        assert pop.propensity(x)[0] == pytest.approx(1 / (1 + np.exp(-(0.15 - 0.5 * 0.8))))
        assert Population("exp").propensity(x)[0] == pytest.approx(1 / (1 + np.exp(-0.15)))

    @pytest.mark.parametrize("family", ["exp", "linear"])
    def test_quadrature_truth_against_monte_carlo(self, family):
        pop = Population(family)
        pi_ref, _ = gauss_mc_mean(lambda x: pop.strata(x)[:, 3], pop.mean, 400_000, 1)
        num, num_se = gauss_mc_mean(lambda x: pop.strata(x)[:, 3] * pop.outcome_model.evaluate(1, "11", x),
                                    pop.mean, 400_000, 1)
        assert pop.stratum_shares()[3] == pytest.approx(pi_ref, abs=2e-3)
        truth = pop.true_estimand(1, "11")
        assert abs(truth * pi_ref - num) < 5 * num_se + 5e-3

    def test_quadrature_is_exact_for_polynomials(self):
        pop = Population("linear")
        m = pop.mean
        got = pop.expectation(lambda x: np.column_stack([x[:, 0], x[:, 1] ** 2, x[:, 0] ** 2 * x[:, 1]]))
        np.testing.assert_allclose(got, [m[0], 1 + m[1] ** 2, (1 + m[0] ** 2) * m[1]], atol=1e-12)

    def test_shares_sum_to_one(self):
        np.testing.assert_allclose(Population("exp", eta=0.4).stratum_shares().sum(), 1.0, atol=1e-12)


class TestGenerate:
    def test_invariants(self, small_labeled):
        small_labeled.check()
        d = small_labeled.data
        assert d.a_dim == 1 and d.c_dim == 1 and d.n == 1500

    def test_deterministic(self):
        cfg = SimulationConfig(n=300, seed=4)
        a, b = generate(cfg, 2), generate(cfg, 2)
        np.testing.assert_array_equal(a.data.y, b.data.y)
        np.testing.assert_array_equal(a.g, b.g)
        assert not np.array_equal(generate(cfg, 3).data.y, a.data.y)

    def test_response_margins(self):
        pop = Population("exp")
        ld = generate(SimulationConfig(n=40_000, seed=9), 0)
        d = ld.data
        e0, e1 = pop.strata_model.margins(d.x)
        for arm, e in ((0, e0), (1, e1)):
            sel = d.z == arm
            resid = d.s[sel] - e[sel]
            assert abs(resid.mean()) < 4 * resid.std() / np.sqrt(sel.sum())

    def test_noise_laws(self):
        rng = np.random.default_rng(0)
        u = Population("exp").noise(rng, 50_000)
        assert u.min() >= -1 and u.max() < 1 and abs(u.var() - 1 / 3) < 0.01
        e = Population("linear").noise(rng, 50_000)
        assert abs(e.var() - 1.0) < 0.03

    def test_revenue_means(self):
        ld = generate(SimulationConfig(n=30_000, family="linear", seed=3), 0)
        pop = Population("linear")
        L0, L1 = pop.outcome_means(ld.data.x)
        rows = np.arange(ld.n)
        resid = (ld.y1 - L1[rows, ld.g])[ld.s1 == 1]
        assert abs(resid.mean()) < 4 / np.sqrt(resid.size)

    def test_config_round_trip(self):
        cfg = SimulationConfig(n=10, delta=0.5, eta=0.25, family="linear", seed=3, reps=2)
        assert SimulationConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            SimulationConfig(family="poisson")
        with pytest.raises(ValueError):
            SimulationConfig.from_dict({"n": 5, "bogus": 1})


class TestApplicationDesign:
    def test_schema_and_invariants(self):
        ld = generate_application(3000, seed=1)
        ld.check()
        d = ld.data
        assert d.a_names == ("a_1",) and d.c_names == tuple(f"c_{j}" for j in range(1, 9))
        assert set(np.unique(d.a)) == {0.0, 1.0}
        for j, k in enumerate(APPLICATION_LEVELS):
            assert set(np.unique(d.c[:, j])) <= set(range(k))
        assert np.all(d.y[d.s == 1] > 0)

    def test_seed_changes_sample_only(self):
        a, b = generate_application(500, seed=1), generate_application(500, seed=1)
        np.testing.assert_array_equal(a.data.y, b.data.y)
        assert not np.array_equal(a.data.y, generate_application(500, seed=2).data.y)


class TestMetrics:
    def test_accuracy(self, small_labeled):
        assert classification_accuracy(small_labeled.g, small_labeled) == 1.0
        assert classification_accuracy(lambda x: np.full(len(x), 3), small_labeled) == pytest.approx(
            np.mean(small_labeled.g == 3))

    def test_observed_assignment_has_ratio_one(self, small_labeled):
        assert policy_revenue(small_labeled.data.z, small_labeled) == pytest.approx(1.0, abs=1e-12)

    def test_oracle_dominates(self):
        pop = Population("exp")
        ld = generate(SimulationConfig(n=20_000, seed=1), 0)
        best = policy_revenue(oracle_policy(pop, ld), ld)
        n = ld.n
        for other in (np.ones(n), np.zeros(n), (ld.data.x[:, 0] > 0).astype(float)):
            assert best >= policy_revenue(other, ld)

    def test_zero_denominator(self):
        ld = generate(SimulationConfig(n=50, seed=0), 0)
        d = ld.data
        from pseudostrata.core import Dataset
        zero = LabeledDataset(Dataset(d.z, d.s, np.zeros(50), d.a, d.c), ld.g, ld.s0, ld.s1,
                              np.zeros(50), np.zeros(50))
        assert np.isnan(policy_revenue(np.ones(50), zero))


@pytest.fixture(scope="module")
def table():
    cfg = SimulationConfig(n=800, family="linear", seed=2, reps=2)
    return run_experiment(cfg, ("proposed", "posterior", "direct"))


class TestHarness:
    def test_columns_and_metrics(self, table):
        assert list(table.columns) == ["n", "delta", "eta", "family", "rep", "method", "metric",
                                       "value", "error"]
        mets = set(table["metric"])
        assert {"est_L1_11", "bias_L0_10", "accuracy", "revenue_ratio"} <= mets
        direct = table[table["method"] == "direct"]
        assert set(direct["metric"]) == {"revenue_ratio"}

    def test_bias_is_estimate_minus_truth(self, table):
        truth = Population("linear").true_estimands()
        r0 = table[table["rep"] == 0].set_index("metric")["value"]
        assert r0["bias_L1_11"] == pytest.approx(r0["est_L1_11"] - truth["L1_11"])

    def test_reproducible_and_worker_independent(self, table):
        cfg = SimulationConfig(n=800, family="linear", seed=2, reps=2)
        again = run_experiment(cfg, ("proposed", "posterior", "direct"), workers=2)
        pd.testing.assert_frame_equal(table, again)

    def test_summaries(self, table):
        summ = summarize_estimands(table)
        assert len(summ) == 4 and (summ["reps"] == 2).all()
        v = table[table["metric"] == "bias_L1_01"]["value"].to_numpy()
        row = summ[summ["estimand"] == "L1_01"].iloc[0]
        assert row["bias"] == pytest.approx(100 * v.mean())
        assert row["mc_se"] == pytest.approx(100 * v.std(ddof=1) / np.sqrt(2))
        meth = summarize_methods(table)
        assert set(meth["method"]) == {"proposed", "posterior", "direct"}
        assert "L0_10" in format_table(table)
        assert failure_counts(table) == {}

    def test_failures_are_recorded(self, monkeypatch):
        import pseudostrata.pipeline as pl

        def boom(*a, **k):
            raise RuntimeError("no fit")

        monkeypatch.setattr(pl, "fit_pipeline", boom)
        df = run_experiment(SimulationConfig(n=100, reps=2), ("proposed",))
        assert failure_counts(df) == {"proposed": 2}
        assert df["error"].str.contains("no fit").all()

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_experiment(SimulationConfig(n=100, reps=1), ("oracle",))
