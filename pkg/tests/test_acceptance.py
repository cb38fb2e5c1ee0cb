"""End-to-end acceptance checks; each prints one PASS/FAIL line in the terminal summary."""

import hashlib
import json
import random
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import dense_viewport_tiles, sort_index_quantile
from semtile.cli import main as cli_main
from semtile.conformal import AciState, CalibrationStore, aci_update, conformal_quantile, difficulty, fit_difficulty
from semtile.experiments import (association_scene, association_suite, match_coverage, mean_metric,
                                relative_reduction, run_grid, stationary_scene)
from semtile.policy import BudgetModel, build_set, fixated_class, lookahead_class
from semtile.predictor import ForecastRequest, LinearTrendForecaster
from semtile.report import ci_excludes_zero, summarize
from semtile.semantics import Edge, SemanticChunkMeta, decode_meta, encode_meta, meta_overhead
from semtile.simulator import SimConfig, run_session
from semtile.sphere import Direction, TileGrid, Viewport, viewport_tiles
from semtile.traces import GazeSample, NetworkTrace, Regime, generate_synthetic

pytestmark = pytest.mark.acceptance

ALPHA = 0.05
SUITE_SEEDS = list(range(20))
SUITE_DURATION_S = 1200


@pytest.fixture(scope="module")
def suite():
    return association_suite(SUITE_SEEDS, SUITE_DURATION_S)


def test_c1_conformal_coverage(verdict):
    # A 49-score window puts the finite-sample expectation at ceil(50 * 0.95) / 50 = 0.96.
    cfg = SimConfig(aci=False, capacity=49, alpha_target=ALPHA)
    t0 = time.perf_counter()
    scored = within = 0
    for seed in range(10):
        s = generate_synthetic(stationary_scene(seed, jitter_deg=1.0 + 0.3 * seed), 1040)
        m = run_session(cfg, s.trace, NetworkTrace.constant(1e6), s.metas)
        assert all(r.regime == "calm" for r in m.rows)
        rows = [r for r in m.rows if r.scored]
        scored += len(rows)
        within += sum(r.within_margin for r in rows)
    elapsed = time.perf_counter() - t0
    cov = within / scored
    ok = scored >= 10_000 and 0.95 <= cov <= 0.97 and elapsed < 60
    verdict("C1 conformal coverage", ok, f"coverage {cov:.4f} over {scored} scored chunks in {elapsed:.1f} s")


def _mondrian_stream(n, storm_frac, seed):
    rng = np.random.default_rng(seed)
    regimes = np.where(rng.random(n) < storm_frac, Regime.STORM, Regime.CALM)
    scale = np.where(regimes == Regime.STORM, 10.0, 1.0)
    return regimes, np.abs(rng.normal(size=n)) * scale


def _online_coverage(regimes, scores, binned):
    store = CalibrationStore(2000)
    hits = {Regime.CALM: [0, 0], Regime.STORM: [0, 0]}
    for r, s in zip(regimes, scores):
        b = r if binned else "all"
        q = conformal_quantile(store, b, ALPHA)
        h = hits[Regime(r)]
        h[0] += s <= q
        h[1] += 1
        store.observe(b, float(s))
    return {r: h[0] / h[1] for r, h in hits.items()}


def test_c2_mondrian_separation(verdict):
    regimes, scores = _mondrian_stream(40_000, 0.2, seed=1)
    per_bin = _online_coverage(regimes, scores, binned=True)
    pooled = _online_coverage(regimes, scores, binned=False)
    floor = 1 - ALPHA - 0.02
    mondrian_ok = all(floor <= c <= 1 for c in per_bin.values())
    worst = min(pooled.values())
    ablation_ok = worst < 1 - ALPHA - 0.03
    detail = (f"mondrian calm {per_bin[Regime.CALM]:.4f} storm {per_bin[Regime.STORM]:.4f}; "
              f"single bin calm {pooled[Regime.CALM]:.4f} storm {pooled[Regime.STORM]:.4f}")
    verdict("C2 mondrian separation", mondrian_ok and ablation_ok, detail)


def test_c3_aci_tracking(verdict):
    rng = np.random.default_rng(3)
    n_before, n_after, window = 30_000, 40_000, 10_000
    scale = np.r_[np.ones(n_before), np.full(n_after, 3.0)]
    scores = np.abs(rng.normal(size=scale.size)) * scale
    store = CalibrationStore(2000)
    state = AciState(ALPHA, ALPHA, 0.005)
    miss = np.zeros(scale.size)
    for i, s in enumerate(scores):
        q = conformal_quantile(store, "all", state.alpha)
        covered = s <= q
        miss[i] = not covered
        state = aci_update(state, covered)
        store.observe("all", float(s))
    trailing = np.convolve(miss, np.ones(window), "valid") / window  # trailing[j] ends at step j + window - 1
    steps = np.arange(window - 1, scale.size)
    in_band = np.abs(trailing - ALPHA) <= 0.01
    recovered = steps >= n_before + 20_000
    ok = bool(in_band[recovered].all())
    first = steps[(steps > n_before) & in_band & np.r_[True, ~in_band[:-1]]]
    detail = (f"trailing miscoverage {trailing[recovered].min():.4f}..{trailing[recovered].max():.4f} "
              f"from shift+20k; peak after shift {trailing[steps > n_before].max():.4f}")
    if first.size:
        detail += f"; back in band {int(first[-1] - n_before)} steps after the shift"
    verdict("C3 ACI tracking", ok, detail)


def test_c4_geometry_and_quantile_oracles(verdict):
    rng = random.Random(404)
    geo_bad = 0
    for _ in range(1000):
        rows, cols = rng.randint(1, 12), rng.randint(1, 12)
        w, h = rng.uniform(0.5, 360), rng.uniform(0.5, 180)
        vp = Viewport(Direction(rng.uniform(-180, 180), rng.uniform(-90, 90)), w, h)
        got = set(viewport_tiles(vp, TileGrid(rows, cols)))
        geo_bad += got != dense_viewport_tiles(vp.center.yaw, vp.center.pitch, w, h, rows, cols)
    q_bad = 0
    for _ in range(1000):
        vals = [rng.expovariate(1.0) for _ in range(rng.randint(0, 400))]
        alpha = rng.uniform(0.001, 0.999)
        store = CalibrationStore(10_000)
        for v in vals:
            store.observe("b", v)
        q_bad += conformal_quantile(store, "b", alpha) != sort_index_quantile(vals, alpha)
    verdict("C4 oracles", geo_bad == 0 and q_bad == 0,
            f"{geo_bad} geometry and {q_bad} quantile mismatches over 1000 cases each")


def test_c5_codec_budget(verdict):
    rng = random.Random(5)
    sizes, lossy = set(), 0
    for _ in range(10_000):
        masks = [rng.getrandbits(32) if rng.random() < 0.5 else 0 for _ in range(64)]
        pairs = {(rng.randrange(32), rng.randrange(32)) for _ in range(rng.randint(0, 11))}
        edges = [(s, d, rng.uniform(1e-4, 1.0)) for s, d in sorted(pairs) if s != d]
        meta = SemanticChunkMeta(rng.randrange(1 << 16), masks, [Edge(*e) for e in edges])
        buf = encode_meta(meta)
        sizes.add(len(buf))
        back = decode_meta(buf)
        same = back.tile_masks == meta.tile_masks and back.chunk_index == meta.chunk_index
        want = {(e.src, e.dst): e.p for e in meta.edges}
        got = {(e.src, e.dst): e.p for e in back.edges}
        same = same and got.keys() == want.keys() and all(abs(got[k] - want[k]) <= 0.5 / 65535 for k in want)
        lossy += not same
    o = meta_overhead(chunk_s=1.0, stream_mbps=15.0)
    kbps, pct = f"{o['kbps']:.3f}", f"{100 * o['fraction_of_stream']:.3f}"
    ok = sizes == {304} and kbps == "2.432" and pct == "0.016" and lossy == 0
    verdict("C5 codec budget", ok, f"sizes {sorted(sizes)} B, {kbps} Kbps, {pct}% of 15 Mbps, {lossy} lossy of 10000")


def test_c6_ablation_direction(suite, verdict):
    t0 = time.perf_counter()
    arms = {p: SimConfig(policy=p) for p in ("ours", "ours_no_lookahead", "kinematic_fixed")}
    runs = run_grid(arms, suite)
    elapsed = time.perf_counter() - t0
    mean = {a: mean_metric(r, "storm_stall_s") for a, r in runs.items()}
    red_ours = relative_reduction(mean["kinematic_fixed"], mean["ours"])
    red_nl = relative_reduction(mean["kinematic_fixed"], mean["ours_no_lookahead"])
    cis = {}
    for arm, base in (("ours", "ours_no_lookahead"), ("ours_no_lookahead", "kinematic_fixed"),
                      ("ours", "kinematic_fixed")):
        rep = summarize({arm: runs[arm], base: runs[base]}, base, ("storm_stall_s",))
        cis[f"{arm}-{base}"] = rep["deltas"][arm]["storm_stall_s"]["ci"]
    ordered = mean["ours"] < mean["ours_no_lookahead"] < mean["kinematic_fixed"]
    ok = ordered and red_ours >= 2 * red_nl and all(ci_excludes_zero(c) for c in cis.values()) and elapsed < 300
    ci_txt = ", ".join(f"{k} [{lo:.2f}, {hi:.2f}]" for k, (lo, hi) in cis.items())
    detail = (f"storm stall s ours {mean['ours']:.2f} < no_lookahead {mean['ours_no_lookahead']:.2f} "
              f"< kinematic {mean['kinematic_fixed']:.2f}; reduction {red_ours:.0%} vs {red_nl:.0%}; "
              f"CIs {ci_txt}; {elapsed:.0f} s")
    verdict("C6 ablation direction", ok, detail)


def test_c7_efficiency_direction(suite, verdict):
    ours = run_grid({"ours": SimConfig()}, suite)["ours"]
    target = mean_metric(ours, "coverage_rate")
    gen_cfg, generic = match_coverage(SimConfig(policy="generic_conformal"), "alpha_target", target, suite, 0.3, 0.005)
    kin_cfg, kinematic = match_coverage(SimConfig(policy="kinematic_fixed"), "fixed_margin_deg", target, suite,
                                        0.0, 120.0)
    cov = {n: mean_metric(r, "coverage_rate") for n, r in (("generic", generic), ("kinematic", kinematic))}
    bw = {n: mean_metric(r, "bandwidth_mbps") for n, r in (("ours", ours), ("generic", generic),
                                                           ("kinematic", kinematic))}
    d1 = summarize({"ours": ours, "generic": generic}, "generic", ("bandwidth_mbps",))["deltas"]["ours"]
    d2 = summarize({"generic": generic, "kinematic": kinematic}, "kinematic", ("bandwidth_mbps",))["deltas"]["generic"]
    ci1, ci2 = d1["bandwidth_mbps"]["ci"], d2["bandwidth_mbps"]["ci"]
    matched = all(abs(c - target) <= 0.005 for c in cov.values())
    ok = matched and bw["ours"] < bw["generic"] < bw["kinematic"] and ci_excludes_zero(ci1) and ci_excludes_zero(ci2)
    detail = (f"coverage ours {target:.4f}, generic {cov['generic']:.4f} (alpha {gen_cfg.alpha_target:.4f}), "
              f"kinematic {cov['kinematic']:.4f} (margin {kin_cfg.fixed_margin_deg:.2f}); "
              f"Mbps {bw['ours']:.2f} < {bw['generic']:.2f} < {bw['kinematic']:.2f}; "
              f"CIs [{ci1[0]:.2f}, {ci1[1]:.2f}], [{ci2[0]:.2f}, {ci2[1]:.2f}]")
    verdict("C7 efficiency direction", ok, detail)


def test_c8_decision_latency(verdict):
    scene = association_scene(8)
    s = generate_synthetic(scene, 120)
    meta, graph, tr = s.metas[0], scene.graph(), s.trace
    store = CalibrationStore(2000)
    rng = np.random.default_rng(8)
    for r in (Regime.CALM, Regime.STORM):
        for v in rng.exponential(size=2000):
            store.observe(r, float(v))
    table = fit_difficulty([(o.class_id, float(e)) for o in scene.objects for e in rng.uniform(1, 9, 40)])
    forecaster = LinearTrendForecaster()
    budget = BudgetModel(15.0 / 64, 12.0, 1.0)
    vp = Viewport(Direction(0, 0))
    windows = []
    for i in range(8, 8 + 10_000):
        j = i % (len(tr) - 8) + 8
        windows.append([GazeSample(float(tr.t_ms[k]), Direction(tr.yaw[k], tr.pitch[k])) for k in range(j - 8, j)])
    times = []
    for n, win in enumerate(windows):
        regime = Regime.STORM if n % 5 == 0 else Regime.CALM
        t = time.perf_counter()
        pred = forecaster.predict(ForecastRequest(win, 1500.0)).predicted
        gaze = win[-1].dir
        sigma = difficulty(table, fixated_class(meta, gaze))
        q = conformal_quantile(store, regime, ALPHA)
        build_set(pred, vp, q * sigma, meta, graph, lookahead_class(meta, gaze, graph), 0.3, budget, ALPHA,
                  "viewport", 10.0)
        times.append(time.perf_counter() - t)
    med = statistics.median(times) * 1000
    p99 = float(np.percentile(times, 99)) * 1000
    verdict("C8 decision latency", med < 1.75, f"median {med:.3f} ms, p99 {p99:.3f} ms over {len(times)} iterations")


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _cli_round(work: Path, scene: Path, capsys) -> dict:
    work.mkdir()
    gen = work / "gen"
    out = {}
    exp = work / "exp.json"
    exp.write_text(json.dumps({
        "arms": {"kinematic_fixed": {}, "ours": {}, "generic_conformal": {}}, "baseline": "kinematic_fixed",
        "seed": 3, "n_boot": 300, "out": "run",
        "sessions": [{"head": "gen/head.csv", "meta": "gen/meta.bin", "network": "gen/network.csv",
                      "graph": "gen/graph.json", "id": "file0"}],
        "suite": {"kind": "association", "seeds": [1, 2], "duration_s": 90},
    }))
    commands = [
        ["generate", str(scene), "--duration", "120", "--seed", "11", "--out", str(gen)],
        ["run", str(exp)],
        ["meta", "decode", str(gen / "meta.bin"), "--out", str(work / "meta.json"), "--stats"],
        ["meta", "encode", str(work / "meta.json"), "--out", str(work / "meta2.bin")],
        ["graph", "--trace", str(gen / "head.csv"), "--meta", str(gen / "meta.bin"), "--classes", "5",
         "--out", str(work / "graph.json")],
        ["summarize", str(work / "run"), "--baseline", "kinematic_fixed", "--seed", "4",
         "--out", str(work / "resummary")],
    ]
    for i, cmd in enumerate(commands):
        code = cli_main(cmd)
        captured = capsys.readouterr()
        out[f"{i}:{cmd[0]}"] = (code, captured.out.replace(str(work), "<work>"))
    return {"exit_and_stdout": out, "files": _digest(work)}


def test_c9_cli_determinism(tmp_path, capsys, verdict):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps(association_scene(6).to_dict()))
    a = _cli_round(tmp_path / "a", scene, capsys)
    b = _cli_round(tmp_path / "b", scene, capsys)
    codes = [c for c, _ in a["exit_and_stdout"].values()]
    differing = sorted(k for k in set(a["files"]) | set(b["files"]) if a["files"].get(k) != b["files"].get(k))
    ok = a == b and all(c == 0 for c in codes)
    verdict("C9 CLI determinism", ok,
            f"{len(a['files'])} files and {len(codes)} commands compared, exit codes {codes}, "
            f"{len(differing)} differing files")

