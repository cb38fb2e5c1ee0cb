import json

import numpy as np
import pytest

from semtile.report import PairingError, bootstrap_ci, ci_excludes_zero, pair_runs, report_json, summarize
from semtile.simulator import SessionMetrics


def metrics(session, **kw):
    base = dict(policy="x", session_id=session, session_s=100.0, n_chunks=100, stall_s=1.0, stall_events=1,
                storm_stall_s=0.5, bandwidth_mbps=8.0, saccade_hit_rate=0.5, calm_hit_rate=0.9,
                coverage_rate=0.9, conformal_coverage=0.95, mbits_total=800.0, capacity_mbits=1500.0)
    base.update(kw)
    return SessionMetrics(**base)


def arm(values, metric="stall_s"):
    return [metrics(f"s{i}", **{metric: v}) for i, v in enumerate(values)]


class TestBootstrap:
    def test_constant_delta(self):
        assert bootstrap_ci([5.0] * 12) == (5.0, 5.0)

    def test_deterministic(self):
        d = np.random.default_rng(0).normal(size=40)
        assert bootstrap_ci(d, seed=3) == bootstrap_ci(d, seed=3)

    def test_empty(self):
        with pytest.raises(PairingError):
            bootstrap_ci([])

    def test_calibration_meta_trials(self):
        # percentile intervals undercover at small n; 1000 trials keep Monte Carlo noise near 0.7%
        rng = np.random.default_rng(2024)
        shift, hits, trials = 1.5, 0, 1000
        for trial in range(trials):
            d = shift + rng.normal(0, 2.0, size=200)
            lo, hi = bootstrap_ci(d, 1000, seed=trial)
            hits += lo <= shift <= hi
        assert hits / trials >= 0.93


class TestSummarize:
    def test_identical_arms(self):
        runs = {"base": arm([1, 2, 3, 4]), "same": arm([1, 2, 3, 4])}
        rep = summarize(runs, "base")
        d = rep["deltas"]["same"]["stall_s"]
        assert d["delta"] == 0 and d["ci"][0] <= 0 <= d["ci"][1]
        assert not ci_excludes_zero(d["ci"])

    def test_constant_shift(self):
        runs = {"base": arm([1, 2, 3, 4]), "plus5": arm([6, 7, 8, 9])}
        d = summarize(runs, "base")["deltas"]["plus5"]["stall_s"]
        assert d["delta"] == 5 and d["ci"] == [5.0, 5.0]
        assert ci_excludes_zero(d["ci"])

    def test_means_and_shape(self):
        runs = {"base": arm([1, 3]), "b": arm([2, 2])}
        rep = summarize(runs, "base", n_boot=200, seed=9)
        assert rep["arms"]["base"]["mean"]["stall_s"] == 2.0
        assert rep["n_boot"] == 200 and rep["seed"] == 9 and rep["note"]
        assert "base" not in rep["deltas"]
        json.loads(report_json(rep))

    def test_deterministic_json(self):
        runs = {"base": arm([1, 3, 2]), "b": arm([2, 2, 5])}
        assert report_json(summarize(runs, "base", seed=1)) == report_json(summarize(runs, "base", seed=1))

    def test_nan_metric(self):
        runs = {"base": arm([np.nan, np.nan], "saccade_hit_rate"), "b": arm([0.1, 0.2], "saccade_hit_rate")}
        d = summarize(runs, "base")["deltas"]["b"]["saccade_hit_rate"]
        assert d["delta"] is None and d["n_pairs"] == 0

    def test_single_run(self):
        with pytest.raises(PairingError):
            summarize({"base": arm([1]), "b": arm([2])}, "base")

    def test_unpaired(self):
        runs = {"base": arm([1, 2, 3]), "b": [metrics("other"), metrics("s1"), metrics("s2")]}
        with pytest.raises(PairingError):
            summarize(runs, "base")

    def test_unknown_baseline(self):
        with pytest.raises(PairingError):
            summarize({"a": arm([1, 2])}, "b")


def test_pairing_by_seed():
    a = [(metrics("s0", stall_s=1.0), 1), (metrics("s0", stall_s=2.0), 2)]
    b = [(metrics("s0", stall_s=5.0), 2), (metrics("s0", stall_s=4.0), 1)]
    pairs = pair_runs(a, b)
    assert [(x.stall_s, y.stall_s) for x, y in pairs] == [(1.0, 4.0), (2.0, 5.0)]
    with pytest.raises(PairingError):
        pair_runs(a + a[:1], b + b[:1])
