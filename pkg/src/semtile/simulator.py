"""Discrete-time, trace-driven tiled streaming loop and its baselines.

Chunk ``c`` plays over session time ``[c*D, (c+1)*D)``. Its tile request is
decided at ``c*D - k`` and downloaded in a slot of length ``D`` starting at
that instant; tiles still missing when the next chunk's slot opens are
abandoned. Network trace time equals session time plus ``k``, so the first
decision happens at network time 0.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .conformal import (AciState, CalibrationStore, DifficultyTable, aci_update, conformal_quantile,
                        difficulty, fit_difficulty, margin as margin_of)
from .policy import BudgetModel, PredictionSet, build_set, fixated_class, lookahead_class
from .predictor import ForecastRequest, load_forecaster
from .semantics import AssociationGraph
from .sphere import Direction, InvalidInput, TileGrid, TileSet, Viewport, viewport_masks
from .traces import GazeSample, HeadTrace, NetworkTrace, Regime, label_regime

POLICIES = ("ours", "kinematic_fixed", "saliency_topk", "generic_conformal",
            "ours_no_lookahead", "ours_generic_difficulty")

# policy -> (mondrian bins, difficulty mode, aci, lookahead)
_POLICY_TRAITS = {
    "ours": (True, "class", True, True),
    "ours_no_lookahead": (True, "class", True, False),
    "ours_generic_difficulty": (True, "global", True, True),
    "generic_conformal": (False, "unit", False, False),
    "kinematic_fixed": (False, "unit", False, False),
    "saliency_topk": (False, "unit", False, False),
}

LOG_COLUMNS = ("chunk", "regime", "alpha", "Q", "margin_deg", "n_foveal", "n_assoc", "covered",
               "stall_ms", "mbits")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    policy: str = "ours"
    seed: int = 0
    grid_rows: int = 8
    grid_cols: int = 8
    fov_w: float = 90.0
    fov_h: float = 90.0
    chunk_s: float = 1.0
    horizon_ms: float = 1000.0
    window: int = 8
    forecaster: str = "linear"
    alpha_target: float = 0.05
    gamma: float = 0.005
    alpha_min: float = 0.005
    alpha_max: float = 0.5
    tau: float = 0.3
    lam: float = 0.5
    theta_storm: float = 100.0
    regime_window_ms: float = 100.0
    tile_mbits: float = 15.0 / 64
    capacity: int = 2000
    sigma_min: float = 1.0
    refit_every: int = 30
    warmup_chunks: int = 30
    fixed_margin_deg: float = 10.0
    saliency_k: int = 16
    assoc_footprint: str = "viewport"
    assoc_margin_deg: float = 10.0
    # explicit overrides of the policy's traits; None keeps the policy default
    mondrian: bool | None = None
    difficulty_mode: str | None = None
    aci: bool | None = None
    lookahead: bool | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise InvalidInput(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if not 0 < self.alpha_target < 1:
            raise InvalidInput("alpha_target must be in (0, 1)")
        if self.chunk_s <= 0 or self.horizon_ms < 0:
            raise InvalidInput("chunk_s must be > 0 and horizon_ms >= 0")
        if self.window < 2:
            raise InvalidInput("forecast window must hold >= 2 samples")
        if not 0 <= self.lam <= 1:
            raise InvalidInput("lam must be in [0, 1]")
        if self.difficulty_mode not in (None, "class", "global", "unit"):
            raise InvalidInput(f"unknown difficulty mode {self.difficulty_mode!r}")
        if self.fixed_margin_deg < 0 or self.saliency_k < 0 or self.warmup_chunks < 0:
            raise InvalidInput("margins, K and warmup must be nonnegative")

    @property
    def grid(self) -> TileGrid:
        return TileGrid(self.grid_rows, self.grid_cols)

    @property
    def viewport(self) -> Viewport:
        return Viewport(Direction(0.0, 0.0), self.fov_w, self.fov_h)

    def traits(self) -> tuple[bool, str, bool, bool]:
        m, d, a, l = _POLICY_TRAITS[self.policy]
        return (m if self.mondrian is None else self.mondrian,
                d if self.difficulty_mode is None else self.difficulty_mode,
                a if self.aci is None else self.aci,
                l if self.lookahead is None else self.lookahead)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ChunkLog:
    chunk: int
    regime: str
    alpha: float
    Q: float
    margin_deg: float
    n_foveal: int
    n_assoc: int
    covered: bool
    stall_ms: float
    mbits: float
    err_deg: float = math.nan
    within_margin: bool = False
    storm_stall_ms: float = 0.0
    scored: bool = True

    def csv_row(self) -> list[str]:
        return [str(self.chunk), self.regime, repr(float(self.alpha)), repr(float(self.Q)),
                repr(float(self.margin_deg)), str(self.n_foveal), str(self.n_assoc),
                str(int(self.covered)), repr(float(self.stall_ms)), repr(float(self.mbits))]


@dataclass
class SessionMetrics:
    policy: str
    session_id: str
    session_s: float
    n_chunks: int
    stall_s: float
    stall_events: int
    storm_stall_s: float
    bandwidth_mbps: float
    saccade_hit_rate: float
    calm_hit_rate: float
    coverage_rate: float
    conformal_coverage: float
    mbits_total: float
    capacity_mbits: float
    rows: list[ChunkLog] = field(default_factory=list, repr=False)

    @classmethod
    def from_summary(cls, d: dict) -> "SessionMetrics":
        known = {f.name for f in fields(cls)} - {"rows"}
        return cls(**{k: (math.nan if d[k] is None else d[k]) for k in known})

    def summary(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "rows"}


def format_chunk_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


def _visible(head: HeadTrace, cfg: SimConfig) -> list[int]:
    cache = head.__dict__.setdefault("_visible_cache", {})
    key = (cfg.fov_w, cfg.fov_h, cfg.grid_rows, cfg.grid_cols)
    if key not in cache:
        cache[key] = viewport_masks(head.yaw, head.pitch, cfg.fov_w, cfg.fov_h, cfg.grid)
    return cache[key]


def _labels(head: HeadTrace, cfg: SimConfig) -> np.ndarray:
    cache = head.__dict__.setdefault("_label_cache", {})
    key = (cfg.regime_window_ms, cfg.theta_storm)
    if key not in cache:
        cache[key] = label_regime(head, cfg.regime_window_ms, cfg.theta_storm)
    return cache[key]


def _max_error(head: HeadTrace, s0: int, s1: int, pred: Direction) -> float:
    dy = np.abs((head.yaw[s0:s1] - pred.yaw + 180.0) % 360.0 - 180.0)
    dp = np.abs(head.pitch[s0:s1] - pred.pitch)
    return float(max(dy.max(), dp.max()))


class _Calibrator:
    """Raw (class, error) history per bin, rescored into a CalibrationStore on each refit."""

    def __init__(self, cfg: SimConfig, mode: str):
        self.cfg = cfg
        self.mode = mode
        self.store = CalibrationStore(cfg.capacity)
        self.history: dict = {}
        self.table = DifficultyTable({}, 1.0, cfg.sigma_min) if mode != "unit" else None
        self.pending = 0

    def sigma(self, cls) -> float:
        if self.mode == "unit":
            return 1.0
        if self.mode == "global":
            return self.table.global_sigma
        return difficulty(self.table, cls)

    def add(self, bin_, cls, err: float):
        h = self.history.setdefault(bin_, deque(maxlen=self.cfg.capacity))
        h.append((cls, err))
        self.store.observe(bin_, err / self.sigma(cls))
        self.pending += 1
        if self.mode != "unit" and self.pending >= self.cfg.refit_every:
            self.refit()

    def refit(self):
        self.pending = 0
        pairs = [p for h in self.history.values() for p in h]
        self.table = fit_difficulty(pairs, self.cfg.sigma_min)
        self.store.clear()
        for bin_, h in self.history.items():
            for cls, err in h:
                self.store.observe(bin_, err / self.sigma(cls))


def _topk_saliency(sal: dict, chunk: int, k: int, n_tiles: int) -> list[int]:
    scores = sal.get(chunk)
    if scores is None:
        raise SimulationError(f"saliency file has no entry for chunk {chunk}")
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:k] if 0 <= t < n_tiles]


def run_session(cfg: SimConfig, head: HeadTrace, net: NetworkTrace, metas, saliency: dict | None = None,
                graph: AssociationGraph | None = None, n_chunks: int | None = None) -> SessionMetrics:
    """Stream one head trace under one network trace with one policy.

    ``metas`` supplies per-chunk tile maps (indexed by chunk); their edges
    form the association graph unless ``graph`` preloads a full one.
    """
    grid = cfg.grid
    D = cfg.chunk_s * 1000.0
    k = cfg.horizon_ms
    period = head.period_ms
    t_rel = head.t_ms - head.t_ms[0]
    avail_chunks = int(head.duration_ms // D)
    if n_chunks is None:
        n_chunks = avail_chunks
    if n_chunks > avail_chunks or n_chunks < 1:
        raise SimulationError(f"head trace covers {avail_chunks} chunks, session needs {n_chunks}")
    meta_by_chunk = {m.chunk_index: m for m in metas}
    missing = [c for c in range(n_chunks) if c not in meta_by_chunk]
    if missing:
        raise SimulationError(f"metadata missing for chunks starting at {missing[0]} (trace shorter than session)")
    if cfg.policy == "saliency_topk" and saliency is None:
        raise SimulationError("saliency_topk needs a saliency file")
    if any(m.grid != grid for m in meta_by_chunk.values()):
        raise SimulationError("metadata grid does not match the configured grid")

    mondrian, diff_mode, use_aci, use_lookahead = cfg.traits()
    forecaster = load_forecaster(cfg.forecaster)
    vp = cfg.viewport
    visible = _visible(head, cfg)
    labels = _labels(head, cfg)
    cal = _Calibrator(cfg, diff_mode)
    aci = {}
    bounds = np.searchsorted(t_rel, np.arange(n_chunks + 1) * D, side="left")

    rows: list[ChunkLog] = []
    feedback = deque()  # (chunk end time, bin, cls, err, covered)
    mbits_total = 0.0
    stall_total = storm_stall = 0.0
    storm_n = storm_hit = calm_n = calm_hit = 0
    events = 0
    prev_stall = False
    covered_n = within_n = scored = 0
    scored_mbits = 0.0

    for c in range(n_chunks):
        t_dec = c * D - k
        while feedback and feedback[0][0] <= t_dec:
            _, bin_, cls, err, cov = feedback.popleft()
            cal.add(bin_, cls, err)
            if use_aci:
                aci[bin_] = aci_update(aci[bin_], cov)

        meta = meta_by_chunk[c]
        i_last = int(np.searchsorted(t_rel, t_dec, side="right")) - 1
        regime = Regime(int(labels[i_last])) if i_last >= 0 else Regime.CALM
        bin_ = regime if mondrian else "all"
        if bin_ not in aci:
            aci[bin_] = AciState(cfg.alpha_target, cfg.alpha_target, cfg.gamma, cfg.alpha_min, cfg.alpha_max)
        alpha = aci[bin_].alpha if use_aci else cfg.alpha_target

        gaze = head.direction(max(i_last, 0))
        target_t = c * D + D / 2.0
        if i_last >= 1:
            lo = max(0, i_last - cfg.window + 1)
            win = [GazeSample(float(t_rel[i]), Direction(head.yaw[i], head.pitch[i])) for i in range(lo, i_last + 1)]
            pred = forecaster.predict(ForecastRequest(win, target_t - win[-1].t)).predicted
        else:
            pred = gaze
        cls = fixated_class(meta, gaze)
        sigma = cal.sigma(cls)

        net_t = t_dec + k
        est = net.megabits(net_t - D, net_t) / cfg.chunk_s
        budget = BudgetModel(cfg.tile_mbits, est, cfg.chunk_s)

        if cfg.policy == "saliency_topk":
            top = _topk_saliency(saliency, c, cfg.saliency_k, grid.n_tiles)
            fov = TileSet.from_ids(grid.n_tiles, top)
            ps = PredictionSet(fov, grid.empty(), fov, math.nan, math.nan, (), tuple(top))
            q = m = math.nan
        else:
            if cfg.policy == "kinematic_fixed":
                q, m = math.nan, cfg.fixed_margin_deg
            else:
                q = conformal_quantile(cal.store, bin_, alpha)
                m = margin_of(q, sigma)
            g = None
            la_cls = None
            if use_lookahead:
                g = graph if graph is not None else AssociationGraph.from_edges(meta.edges)
                la_cls = lookahead_class(meta, gaze, g)
            ps = build_set(pred, vp, m, meta, g, la_cls, cfg.tau, budget, alpha,
                           cfg.assoc_footprint, cfg.assoc_margin_deg)

        # download slot: [net_t, net_t + D), FIFO in ps.order
        slot_end = net_t + D
        link = net.megabits(net_t, slot_end)
        want = len(ps.order) * cfg.tile_mbits
        got = min(want, link)
        mbits_total += got
        arrivals = []
        for j, t in enumerate(ps.order):
            fin = net.finish_time(net_t, (j + 1) * cfg.tile_mbits)
            if fin > slot_end:
                break
            arrivals.append((fin - k, t))
        delivered = 0
        late = []
        for fin, t in arrivals:
            if fin <= c * D:
                delivered |= 1 << t
            else:
                late.append((fin, t))

        s0, s1 = int(bounds[c]), int(bounds[c + 1])
        vis_union = 0
        stall_ms = st_storm = 0.0
        is_scored = c >= cfg.warmup_chunks
        have = delivered
        li = 0
        for s in range(s0, s1):
            if late:
                ts = t_rel[s]
                while li < len(late) and late[li][0] <= ts:
                    have |= 1 << late[li][1]
                    li += 1
            v = visible[s]
            vis_union |= v
            stalled = bool(v & ~have)
            storm = labels[s] == Regime.STORM
            if stalled:
                stall_ms += period
                if storm:
                    st_storm += period
            if is_scored:
                if stalled and not prev_stall:
                    events += 1
                prev_stall = stalled
                if storm:
                    storm_n += 1
                    storm_hit += not stalled
                else:
                    calm_n += 1
                    calm_hit += not stalled

        covered = (vis_union & ~ps.total.bits) == 0
        err = _max_error(head, s0, s1, pred) if s1 > s0 else 0.0
        within = err <= m if not math.isnan(m) else covered
        feedback.append(((c + 1) * D, bin_, cls, err, covered))
        if is_scored:
            stall_total += stall_ms
            storm_stall += st_storm
            covered_n += covered
            within_n += within
            scored += 1
            scored_mbits += got
        logged_alpha = math.nan if cfg.policy in ("saliency_topk", "kinematic_fixed") else alpha
        rows.append(ChunkLog(c, str(regime), logged_alpha, q, m, len(ps.foveal), len(ps.associative), covered,
                             stall_ms, got, err, within, st_storm, is_scored))

    capacity_mbits = net.megabits(0.0, (n_chunks - 1) * D + D)
    if mbits_total > capacity_mbits + 1e-6:
        raise SimulationError(f"conservation violated: {mbits_total} > {capacity_mbits} Mbit")
    session_s = scored * cfg.chunk_s
    nan = math.nan
    return SessionMetrics(
        policy=cfg.policy,
        session_id=head.session_id,
        session_s=session_s,
        n_chunks=scored,
        stall_s=stall_total / 1000.0,
        stall_events=events,
        storm_stall_s=storm_stall / 1000.0,
        bandwidth_mbps=scored_mbits / session_s if session_s else nan,
        saccade_hit_rate=storm_hit / storm_n if storm_n else nan,
        calm_hit_rate=calm_hit / calm_n if calm_n else nan,
        coverage_rate=covered_n / scored if scored else nan,
        conformal_coverage=within_n / scored if scored else nan,
        mbits_total=mbits_total,
        capacity_mbits=capacity_mbits,
        rows=rows,
    )
