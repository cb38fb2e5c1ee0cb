"""Paired comparison of experiment arms with percentile-bootstrap intervals."""

from __future__ import annotations

import json
import math

import numpy as np

from .simulator import SessionMetrics

N_BOOT = 1000
DEFAULT_METRICS = ("stall_s", "storm_stall_s", "stall_events", "bandwidth_mbps", "saccade_hit_rate",
                   "calm_hit_rate", "coverage_rate", "conformal_coverage")

FORECASTER_NOTE = ("all arms share one point forecaster; the kinematic baseline differs only in its "
                   "fixed margin, so deltas isolate the set-construction policy")


class PairingError(ValueError):
    pass


def bootstrap_ci(deltas, n_boot: int = N_BOOT, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of paired deltas."""
    d = np.asarray(deltas, dtype=float)
    if d.size == 0:
        raise PairingError("no paired deltas")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(n_boot, d.size))
    means = d[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    # zero-variance samples should give an exact degenerate interval
    if np.all(d == d[0]):
        lo = hi = float(d[0])
    return float(lo), float(hi)


def _key(m: SessionMetrics, seed) -> tuple:
    return (m.session_id, seed)


def pair_runs(arm: list, base: list) -> list[tuple[SessionMetrics, SessionMetrics]]:
    """Match runs by (session, seed). Entries may be SessionMetrics or (metrics, seed) tuples."""
    def index(runs):
        out = {}
        for r in runs:
            m, seed = r if isinstance(r, tuple) else (r, None)
            k = _key(m, seed)
            if k in out:
                raise PairingError(f"duplicate run for {k}")
            out[k] = m
        return out
    a, b = index(arm), index(base)
    if set(a) != set(b):
        missing = sorted(map(str, set(a) ^ set(b)))[:3]
        raise PairingError(f"arms are not paired; unmatched keys include {missing}")
    return [(a[k], b[k]) for k in sorted(a, key=str)]


def _num(x) -> float | None:
    x = float(x)
    return None if math.isnan(x) else x


def _mean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else math.nan


def summarize(runs: dict[str, list], baseline: str, metrics=DEFAULT_METRICS, n_boot: int = N_BOOT,
              seed: int = 0) -> dict:
    """Per-arm means plus paired deltas (arm - baseline) with bootstrap CIs.

    Needs at least two runs per arm. Deterministic for a given ``seed``.
    """
    if baseline not in runs:
        raise PairingError(f"baseline arm {baseline!r} not among {sorted(runs)}")
    for arm, rs in runs.items():
        if len(rs) < 2:
            raise PairingError(f"arm {arm!r} has {len(rs)} run(s); need >= 2")
    arms = {}
    for arm, rs in runs.items():
        ms = [r[0] if isinstance(r, tuple) else r for r in rs]
        arms[arm] = {"n": len(ms), "mean": {k: _num(_mean([getattr(m, k) for m in ms])) for k in metrics}}
    deltas = {}
    for i, arm in enumerate(sorted(runs)):
        if arm == baseline:
            continue
        pairs = pair_runs(runs[arm], runs[baseline])
        out = {}
        for j, k in enumerate(metrics):
            d = np.array([getattr(a, k) - getattr(b, k) for a, b in pairs], dtype=float)
            d = d[~np.isnan(d)]
            if d.size == 0:
                out[k] = {"delta": None, "ci": [None, None], "n_pairs": 0}
                continue
            lo, hi = bootstrap_ci(d, n_boot, seed=seed + 7919 * i + j)
            out[k] = {"delta": float(d.mean()), "ci": [lo, hi], "n_pairs": int(d.size),
                      "paired": [float(x) for x in d]}
        deltas[arm] = out
    return {"baseline": baseline, "n_boot": n_boot, "seed": seed, "note": FORECASTER_NOTE,
            "arms": arms, "deltas": deltas}


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def ci_excludes_zero(ci) -> bool:
    lo, hi = ci
    return lo is not None and (lo > 0 or hi < 0)
