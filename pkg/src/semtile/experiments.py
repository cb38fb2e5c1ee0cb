"""Synthetic evaluation suites and grid execution over (arm, session) pairs."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .semantics import AssociationGraph
from .simulator import SessionMetrics, SimConfig, run_session
from .sphere import Direction, InvalidInput
from .traces import (NetworkTrace, SceneObject, SyntheticSceneSpec, SyntheticSession, generate_synthetic,
                     synthetic_network, synthetic_saliency)


@dataclass
class SuiteCase:
    session: SyntheticSession
    net: NetworkTrace
    saliency: dict | None = None
    graph: AssociationGraph | None = None

    @property
    def session_id(self) -> str:
        return self.session.trace.session_id


def association_scene(seed: int, n_objects: int = 5, dwell_s: tuple[float, float] = (40.0, 80.0),
                      jitter_deg: tuple[float, float] = (0.5, 3.0), successor_p: float = 0.8,
                      jitter_tau_s: float = 2.0, saccade_speed_dps: float = 250.0,
                      user_spread: float = 2.0) -> SyntheticSceneSpec:
    """A ring of objects where each one strongly predicts the next.

    Objects sit evenly around the yaw circle (random rotation, pitch within
    +-20). Every row of the transition matrix sends ``successor_p`` to the
    next object and spreads the rest evenly. Users are heterogeneous: each
    seed draws a dwell mean and a steadiness factor, log-uniform in
    ``[1/user_spread, user_spread]``, that scales every object's jitter.
    """
    if n_objects < 2:
        raise InvalidInput("association scene needs >= 2 objects")
    rng = np.random.default_rng([seed, 0x5CE4E])
    rot = rng.uniform(-180.0, 180.0)
    step = 360.0 / n_objects
    dwell = rng.uniform(*dwell_s)
    steadiness = math.exp(rng.uniform(-1.0, 1.0) * math.log(user_spread)) if user_spread > 1 else 1.0
    objs = []
    for i in range(n_objects):
        center = Direction(rot + i * step, rng.uniform(-20.0, 20.0))
        objs.append(SceneObject(i, center, float(dwell), f"obj{i}", float(steadiness * rng.uniform(*jitter_deg))))
    rest = (1.0 - successor_p) / (n_objects - 2) if n_objects > 2 else 0.0
    trans = []
    for i in range(n_objects):
        row = [rest] * n_objects
        row[i] = 0.0
        row[(i + 1) % n_objects] = successor_p if n_objects > 2 else 1.0
        trans.append(row)
    return SyntheticSceneSpec(tuple(objs), tuple(map(tuple, trans)), saccade_speed_dps, 1.0, seed, jitter_tau_s)


def stationary_scene(seed: int, jitter_deg: float = 2.0, jitter_tau_s: float = 2.0) -> SyntheticSceneSpec:
    """One object, no transitions: a single-regime (all Calm) viewer."""
    obj = SceneObject(0, Direction(0.0, 0.0), 1e9, "target", jitter_deg)
    return SyntheticSceneSpec((obj,), ((0.0,),), 250.0, jitter_deg, seed, jitter_tau_s)


def make_case(scene: SyntheticSceneSpec, duration_s: float, net_seed: int | None = None,
              with_saliency: bool = False, horizon_ms: float = 1000.0) -> SuiteCase:
    session = generate_synthetic(scene, duration_s)
    seed = scene.seed if net_seed is None else net_seed
    net = synthetic_network(duration_s + horizon_ms / 1000.0 + 1.0, seed)
    sal = synthetic_saliency(session, seed) if with_saliency else None
    return SuiteCase(session, net, sal, scene.graph())


def association_suite(seeds, duration_s: float = 1200.0, with_saliency: bool = False, **scene_kw) -> list[SuiteCase]:
    return [make_case(association_scene(s, **scene_kw), duration_s, with_saliency=with_saliency) for s in seeds]


def run_case(cfg: SimConfig, case: SuiteCase) -> SessionMetrics:
    s = case.session
    return run_session(cfg, s.trace, case.net, s.metas, case.saliency, case.graph)


def _run_job(job):
    arm, cfg, case = job
    try:
        return arm, run_case(cfg, case)
    except Exception as exc:
        raise RuntimeError(f"arm {arm!r} on session {case.session_id!r} failed: {exc}") from exc


def run_grid(arms: dict[str, SimConfig], cases: list[SuiteCase], jobs: int = 1) -> dict[str, list[SessionMetrics]]:
    """Every arm on every case; results keep case order so arms stay paired."""
    todo = [(arm, cfg, case) for arm, cfg in arms.items() for case in cases]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            done = list(ex.map(_run_job, todo))
    else:
        done = [_run_job(j) for j in todo]
    out: dict[str, list[SessionMetrics]] = {arm: [] for arm in arms}
    for arm, m in done:
        out[arm].append(m)
    return out


def mean_metric(runs: list[SessionMetrics], metric: str) -> float:
    return float(np.mean([getattr(r, metric) for r in runs]))


def match_coverage(cfg: SimConfig, knob: str, target: float, cases: list[SuiteCase], lo: float, hi: float,
                   tol: float = 0.005, max_iter: int = 20, jobs: int = 1) -> tuple[SimConfig, list[SessionMetrics]]:
    """Bisect one monotone config knob until mean coverage is within ``tol`` of ``target``.

    The knob must raise coverage as it moves from ``lo`` to ``hi`` (e.g. a
    fixed margin); for knobs that lower it, such as alpha, pass ``lo > hi``.
    Bisection aims for half the tolerance so the match is not left on the edge.
    """
    best = None
    for _ in range(max_iter):
        mid = (lo + hi) / 2.0
        c = replace(cfg, **{knob: mid})
        runs = run_grid({"x": c}, cases, jobs)["x"]
        cov = mean_metric(runs, "coverage_rate")
        if best is None or abs(cov - target) < abs(best[2] - target):
            best = (c, runs, cov)
        if abs(cov - target) <= tol / 2:
            break
        if cov < target:
            lo = mid
        else:
            hi = mid
    c, runs, cov = best
    if abs(cov - target) > tol:
        raise RuntimeError(f"could not match coverage {target:.4f} with {knob}; closest {cov:.4f}")
    return c, runs


def relative_reduction(base: float, arm: float) -> float:
    return (base - arm) / base if base > 0 else math.nan
