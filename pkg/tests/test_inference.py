import numpy as np
import pytest

import pseudostrata.inference as inf
from pseudostrata.core import Dataset
from pseudostrata.inference import (BootstrapError, SensitivityGrid, bootstrap, convergence_diagnostic,
                                    format_interval, pipeline_estimator, sensitivity_sweep, sweep_point,
                                    write_json)
from pseudostrata.pipeline import PipelineConfig, fit_pipeline
from pseudostrata.simulation import SimulationConfig, generate, generate_application
from pseudostrata.strata import pi11_closed_form

from oracles import pi11_bisection


def gaussian_dataset(n, sigma=2.0, seed=0):
    rng = np.random.default_rng(seed)
    y = 10.0 + sigma * rng.standard_normal(n)
    return Dataset(np.arange(n) % 2, np.ones(n), y, np.zeros((n, 1)), np.zeros((n, 1)))


def mean_y(d):
    return float(np.mean(d.y))


class TestBootstrap:
    def test_identical_rows_give_zero_width(self):
        d = Dataset(np.ones(30), np.ones(30), np.full(30, 4.2), np.zeros((30, 1)), np.zeros((30, 1)))
        res = bootstrap(d, mean_y, B=20)
        lo, hi = res.percentile_interval()
        assert lo == hi == pytest.approx(4.2)
        assert res.point["estimate"] == pytest.approx(4.2)

    def test_width_matches_normal_theory(self):
        n, sigma = 400, 2.0
        res = bootstrap(gaussian_dataset(n, sigma), mean_y, B=200, seed=1)
        lo, hi = res.percentile_interval()
        target = 2 * 1.959964 * sigma / np.sqrt(n)
        assert abs((hi - lo) - target) < 0.25 * target
        nlo, nhi = res.normal_interval()
        assert abs((nhi - nlo) - target) < 0.25 * target

    def test_reproducible_and_worker_independent(self):
        d = gaussian_dataset(100)
        a = bootstrap(d, mean_y, B=30, seed=7)
        b = bootstrap(d, mean_y, B=30, seed=7)
        c = bootstrap(d, mean_y, B=30, seed=7, workers=2)
        np.testing.assert_array_equal(a.replicates, b.replicates)
        np.testing.assert_array_equal(a.replicates, c.replicates)
        assert not np.array_equal(a.replicates, bootstrap(d, mean_y, B=30, seed=8).replicates)

    def test_endpoints_are_order_statistics(self):
        res = bootstrap(gaussian_dataset(80), mean_y, B=57, seed=2)
        reps = res.replicates[:, 0]
        lo, hi = res.percentile_interval()
        srt = np.sort(reps)
        # type-1 quantile: smallest order statistic with empirical CDF >= p
        assert lo == srt[int(np.ceil(0.025 * 57)) - 1]
        assert hi == srt[int(np.ceil(0.975 * 57)) - 1]
        assert lo <= res.median() <= hi

    def test_failures_recorded_and_excluded(self):
        d = gaussian_dataset(60, seed=3)
        cut = np.quantile(bootstrap(d, mean_y, B=50, seed=4).replicates[:, 0], 0.9)

        def flaky(dd):
            v = mean_y(dd)
            if v > cut and dd.n == 60 and not np.array_equal(dd.y, d.y):
                raise RuntimeError("resample rejected")
            return v

        res = bootstrap(d, flaky, B=50, seed=4)
        assert res.n_failed == 5
        assert np.isnan(res.replicates[list(res.failures), 0]).all()
        assert "resample rejected" in next(iter(res.failures.values()))
        assert np.isfinite(res.percentile_interval()).all()
        rows = res.tidy_rows()
        assert sum(r["failed"] for r in rows) == 5

    def test_too_many_failures(self):
        d = gaussian_dataset(40)

        def only_original(dd):
            if not np.array_equal(dd.y, d.y):
                raise RuntimeError("nope")
            return 1.0

        with pytest.raises(BootstrapError, match="10 of 10 resamples failed"):
            bootstrap(d, only_original, B=10)

    def test_small_B(self):
        with pytest.raises(ValueError):
            bootstrap(gaussian_dataset(10), mean_y, B=1)

    def test_dict_estimator_summary(self):
        res = bootstrap(gaussian_dataset(50), lambda d: {"m": mean_y(d), "sd": float(np.std(d.y))}, B=20)
        summ = res.summary()
        assert set(summ["estimands"]) == {"m", "sd"}
        assert summ["B"] == 20 and summ["failed"] == 0


class TestFormat:
    def test_reference_layout(self):
        assert format_interval(143.444, 29.7, 257.18) == "143.44 (29.70, 257.18)"
        assert format_interval(-0.5, -1.0, 0.25, digits=3) == "-0.500 (-1.000, 0.250)"

    def test_huge_values_use_scientific(self):
        assert format_interval(1.0, -2.5e9, 3e9) == "1.00 (-2.5e+09, 3e+09)"

    def test_json_writer_nulls(self, tmp_path):
        write_json({"a": float("nan"), "b": [np.float64(1.5), np.int64(2)]}, tmp_path / "x.json")
        assert (tmp_path / "x.json").read_text() == '{\n  "a": null,\n  "b": [\n    1.5,\n    2\n  ]\n}\n'


@pytest.fixture(scope="module")
def linear_data():
    return generate(SimulationConfig(n=4000, family="linear", eta=0.25, seed=6), 0).data


class TestSensitivity:
    def test_single_eta_equals_plain_fit(self, linear_data):
        cfg = PipelineConfig(family="linear", em_restarts=1)
        grid = sensitivity_sweep(linear_data, [0.0], cfg)
        plain = fit_pipeline(linear_data, cfg)
        col = grid.column(0.0)
        for k, v in plain.estimands().items():
            assert col[k] == v
        assert col["value_proposed"] == plain.evaluate("proposed").value

    def test_points_are_independent(self, linear_data):
        cfg = PipelineConfig(family="linear", em_restarts=1)
        both = sensitivity_sweep(linear_data, [0.0, 0.5], cfg)
        alone = sensitivity_sweep(linear_data, [0.5], cfg)
        assert both.column(0.5) == alone.column(0.5)

    def test_failures_do_not_stop_sweep(self, linear_data, monkeypatch):
        real = inf.sweep_point

        def picky(d, cfg, methods):
            if cfg.eta == 0.25:
                raise RuntimeError("bad eta")
            return real(d, cfg, methods)

        monkeypatch.setattr(inf, "sweep_point", picky)
        grid = sensitivity_sweep(linear_data, [0.0, 0.25, 0.5],
                                 PipelineConfig(family="linear", strata_method="closed_form"))
        assert grid.column(0.25) is None and "bad eta" in grid.errors[0.25]
        assert grid.column(0.5) is not None
        assert any(r["quantity"] == "failed" for r in grid.tidy_rows())

    def test_eta_order(self, linear_data):
        with pytest.raises(ValueError):
            sensitivity_sweep(linear_data, [0.5, 0.0])
        with pytest.raises(ValueError):
            SensitivityGrid([0.0, 0.0], [None, None])

    def test_pi11_increases_with_eta_on_application_schema(self):
        d = generate_application(20000, seed=3).data
        etas = [0.0, 0.5, 1.0, 2.0, 3.5]
        cfg = PipelineConfig(strata_method="closed_form")
        grid = sensitivity_sweep(d, etas, cfg, methods=())
        shares = grid.series("pi_11")
        assert np.all(np.diff(shares) > 0)
        # the closed form at fixed margins follows the bisection root
        fp = fit_pipeline(d, cfg)
        e0, e1 = fp.rates.predict(d.x[:5])
        for eta in etas:
            got = pi11_closed_form(e0, e1, np.exp(eta))
            ref = [pi11_bisection(a, b, np.exp(eta)) for a, b in zip(e0, e1)]
            np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_true_eta_minimises_share_bias(self):
        from pseudostrata.simulation import Population
        d = generate(SimulationConfig(n=20000, family="linear", eta=0.25, seed=12), 0).data
        truth = Population("linear", eta=0.25).stratum_shares()[3]
        grid = sensitivity_sweep(d, [0.0, 0.25, 0.5, 1.0],
                                 PipelineConfig(family="linear", strata_method="closed_form"), methods=())
        bias = np.abs(grid.series("pi_11") - truth)
        assert int(np.argmin(bias)) == 1

    def test_pipeline_estimator_keys(self, linear_data):
        est = pipeline_estimator(PipelineConfig(family="linear", strata_method="closed_form"))(linear_data)
        assert {"L1_11", "L0_10", "L1_11_minus_L0_11", "pi_11"} <= set(est)
        assert est["L1_11_minus_L0_11"] == pytest.approx(est["L1_11"] - est["L0_11"])


class TestConvergence:
    def test_sample_mean_rate(self):
        def gen(n, rep):
            return np.random.default_rng([n, rep]).standard_normal(n)

        tab = convergence_diagnostic(gen, [100, 400, 1600, 6400], 200, np.mean, truth=0.0)
        assert abs(tab.slope + 0.5) < 0.1
        assert len(tab.to_rows()) == 4

    def test_failures_are_skipped(self):
        def est(v):
            if v.size == 100 and v[0] > 1.0:
                raise RuntimeError("skip")
            return float(np.mean(v))

        tab = convergence_diagnostic(lambda n, r: np.random.default_rng([n, r]).standard_normal(n),
                                     [100, 400], 50, est)
        assert 100 in tab.failures and 400 not in tab.failures
