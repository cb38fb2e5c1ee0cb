"""Head and network traces: CSV I/O, regime labelling, synthetic generation."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .semantics import MAX_CLASSES, AssociationGraph, SemanticChunkMeta
from .sphere import Direction, InvalidInput, TileGrid, Viewport, viewport_tiles, wrap_yaw

DEFAULT_RATE_HZ = 100.0
STORM_THRESHOLD_DPS = 100.0
REGIME_WINDOW_MS = 100.0
OBJECT_RADIUS_DEG = 10.0


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class Regime(enum.IntEnum):
    CALM = 0
    STORM = 1

    def __str__(self):
        return self.name.lower()


@dataclass(frozen=True)
class GazeSample:
    t: float
    dir: Direction
    fixated_class: int | None = None


@dataclass
class HeadTrace:
    """Uniformly sampled head orientation; arrays share one index.

    ``class_id`` holds the ground-truth fixated class or -1 where unknown.
    """

    session_id: str
    rate_hz: float
    t_ms: np.ndarray
    yaw: np.ndarray
    pitch: np.ndarray
    class_id: np.ndarray = None

    def __post_init__(self):
        self.t_ms = np.asarray(self.t_ms, dtype=float)
        n = len(self.t_ms)
        self.yaw = np.asarray(self.yaw, dtype=float)
        self.pitch = np.asarray(self.pitch, dtype=float)
        if self.class_id is None:
            self.class_id = np.full(n, -1, dtype=int)
        self.class_id = np.asarray(self.class_id, dtype=int)
        if not (len(self.yaw) == len(self.pitch) == len(self.class_id) == n):
            raise InvalidInput("trace arrays must share one length")
        if n == 0:
            raise InvalidInput("empty head trace")
        if not (np.isfinite(self.yaw).all() and np.isfinite(self.pitch).all()):
            raise InvalidInput("non-finite angle in head trace")
        self.yaw = (self.yaw + 180.0) % 360.0 - 180.0
        self.yaw[self.yaw >= 180.0] -= 360.0
        self.pitch = np.clip(self.pitch, -90.0, 90.0)
        if n > 1:
            dt = np.diff(self.t_ms)
            if (dt <= 0).any():
                raise InvalidInput("timestamps must be strictly increasing")
            period = 1000.0 / self.rate_hz
            if np.abs(dt - period).max() > 0.01 * period:
                raise InvalidInput(f"sample spacing deviates more than 1% from {period:.3f} ms")

    def __len__(self):
        return len(self.t_ms)

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.rate_hz

    @property
    def duration_ms(self) -> float:
        return float(self.t_ms[-1] - self.t_ms[0]) + self.period_ms

    def direction(self, i: int) -> Direction:
        return Direction(self.yaw[i], self.pitch[i])

    def samples(self) -> Iterator[GazeSample]:
        for i in range(len(self)):
            c = int(self.class_id[i])
            yield GazeSample(float(self.t_ms[i]), self.direction(i), None if c < 0 else c)

    @classmethod
    def from_samples(cls, session_id: str, rate_hz: float, samples: Sequence[GazeSample]) -> "HeadTrace":
        return cls(session_id, rate_hz,
                   [s.t for s in samples], [s.dir.yaw for s in samples], [s.dir.pitch for s in samples],
                   [-1 if s.fixated_class is None else s.fixated_class for s in samples])


def parse_head_trace(text: str, session_id: str = "trace", rate_hz: float | None = None) -> HeadTrace:
    """Parse ``t_ms,yaw_deg,pitch_deg[,class_id]`` CSV text.

    Errors name the 1-based file line (the header is line 1). If ``rate_hz``
    is omitted it is inferred from the median sample spacing.
    """
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    header = [h.strip() for h in lines[0].split(",")]
    if header[:3] != ["t_ms", "yaw_deg", "pitch_deg"] or header[3:] not in ([], ["class_id"]):
        raise ParseError(f"expected header t_ms,yaw_deg,pitch_deg[,class_id], got {lines[0]!r}", 1)
    has_class = len(header) == 4
    t, yaw, pitch, cls = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(parts)}", lineno)
        try:
            tv, yv, pv = float(parts[0]), float(parts[1]), float(parts[2])
            cv = int(parts[3]) if has_class and parts[3] != "" else -1
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not all(math.isfinite(v) for v in (tv, yv, pv)):
            raise ParseError("non-finite value", lineno)
        if t and tv <= t[-1]:
            raise ParseError(f"t_ms {tv:g} does not increase (previous {t[-1]:g})", lineno)
        t.append(tv)
        yaw.append(yv)
        pitch.append(pv)
        cls.append(cv)
    if not t:
        raise ParseError("no samples", 2)
    if rate_hz is None:
        rate_hz = 1000.0 / float(np.median(np.diff(t))) if len(t) > 1 else DEFAULT_RATE_HZ
    try:
        return HeadTrace(session_id, rate_hz, t, yaw, pitch, cls)
    except InvalidInput as exc:
        raise ParseError(str(exc)) from None


def format_head_trace(trace: HeadTrace, with_class: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_ms", "yaw_deg", "pitch_deg"] + (["class_id"] if with_class else []))
    for i in range(len(trace)):
        row = [repr(float(trace.t_ms[i])), repr(float(trace.yaw[i])), repr(float(trace.pitch[i]))]
        if with_class:
            c = int(trace.class_id[i])
            row.append("" if c < 0 else str(c))
        w.writerow(row)
    return buf.getvalue()


@dataclass
class NetworkTrace:
    """Piecewise-constant link capacity; each breakpoint holds until the next.

    Times before the first breakpoint take the first capacity.
    """

    t_ms: np.ndarray
    mbps: np.ndarray

    def __post_init__(self):
        self.t_ms = np.asarray(self.t_ms, dtype=float)
        self.mbps = np.asarray(self.mbps, dtype=float)
        if len(self.t_ms) == 0 or len(self.t_ms) != len(self.mbps):
            raise InvalidInput("network trace needs matching, nonempty t_ms and mbps")
        if (np.diff(self.t_ms) <= 0).any():
            raise InvalidInput("network breakpoints must be strictly increasing")
        if (self.mbps < 0).any() or not np.isfinite(self.mbps).all():
            raise InvalidInput("capacities must be finite and nonnegative")
        # cumulative megabits at each breakpoint
        widths = np.diff(self.t_ms) / 1000.0
        self._cum = np.concatenate([[0.0], np.cumsum(widths * self.mbps[:-1])])

    @classmethod
    def constant(cls, mbps: float) -> "NetworkTrace":
        return cls([0.0], [mbps])

    def capacity_at(self, t: float) -> float:
        i = int(np.searchsorted(self.t_ms, t, side="right")) - 1
        return float(self.mbps[max(i, 0)])

    def _cum_at(self, t: float) -> float:
        if t <= self.t_ms[0]:
            return (t - self.t_ms[0]) / 1000.0 * self.mbps[0]
        i = int(np.searchsorted(self.t_ms, t, side="right")) - 1
        return self._cum[i] + (t - self.t_ms[i]) / 1000.0 * self.mbps[i]

    def megabits(self, t0: float, t1: float) -> float:
        """Capacity integral over [t0, t1] in megabits."""
        if t1 <= t0:
            return 0.0
        return float(self._cum_at(t1) - self._cum_at(t0))

    def finish_time(self, t0: float, megabits: float) -> float:
        """Earliest time by which ``megabits`` can be moved starting at ``t0``; inf if never."""
        if megabits <= 0:
            return t0
        target = self._cum_at(t0) + megabits
        i = max(int(np.searchsorted(self.t_ms, t0, side="right")) - 1, 0)
        while True:
            seg_end = self.t_ms[i + 1] if i + 1 < len(self.t_ms) else math.inf
            start = max(t0, self.t_ms[i]) if i > 0 else t0
            rate = self.mbps[i]
            if rate > 0:
                t = start + (target - self._cum_at(start)) / rate * 1000.0
                if t <= seg_end:
                    return float(t)
            if math.isinf(seg_end):
                return math.inf
            i += 1


def parse_network_trace(text: str) -> NetworkTrace:
    lines = text.splitlines()
    if not lines or [h.strip() for h in lines[0].split(",")] != ["t_ms", "mbps"]:
        raise ParseError("expected header t_ms,mbps", 1)
    t, v = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"expected 2 columns, got {len(parts)}", lineno)
        try:
            tv, mv = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not (math.isfinite(tv) and math.isfinite(mv)):
            raise ParseError("non-finite value", lineno)
        if mv <= 0:
            raise ParseError(f"capacity must be > 0, got {mv:g}", lineno)
        if t and tv <= t[-1]:
            raise ParseError(f"t_ms {tv:g} does not increase", lineno)
        t.append(tv)
        v.append(mv)
    if not t:
        raise ParseError("no breakpoints", 2)
    return NetworkTrace(t, v)


def format_network_trace(net: NetworkTrace) -> str:
    out = ["t_ms,mbps"]
    out += [f"{float(t)!r},{float(m)!r}" for t, m in zip(net.t_ms, net.mbps)]
    return "\n".join(out) + "\n"


def synthetic_network(duration_s: float, seed: int, lo: float = 5.0, hi: float = 20.0,
                      step_ms: float = 1000.0, persistence: float = 0.8) -> NetworkTrace:
    """Bounded AR(1) capacity walk in [lo, hi] Mbps, one breakpoint per step."""
    rng = np.random.default_rng(seed)
    n = max(1, int(math.ceil(duration_s * 1000.0 / step_ms)))
    mid, span = (lo + hi) / 2.0, (hi - lo) / 2.0
    x = rng.uniform(-1.0, 1.0)
    vals = []
    for _ in range(n):
        x = persistence * x + (1 - persistence) * rng.uniform(-1.0, 1.0) * 2.0
        x = max(-1.0, min(1.0, x))
        vals.append(mid + span * x)
    return NetworkTrace(np.arange(n) * step_ms, vals)


def label_regime(trace: HeadTrace, window_ms: float = REGIME_WINDOW_MS,
                 threshold_dps: float = STORM_THRESHOLD_DPS) -> np.ndarray:
    """Per-sample :class:`Regime` codes (int8 array).

    Speed is the Chebyshev angular change over the trailing window divided by
    the elapsed time; STORM iff speed strictly exceeds the threshold. Samples
    without a full trailing window are CALM.
    """
    lag = int(round(window_ms / trace.period_ms))
    if lag < 2:
        raise InvalidInput(f"regime window {window_ms} ms spans fewer than 2 sample periods")
    out = np.zeros(len(trace), dtype=np.int8)
    if len(trace) <= lag:
        return out
    dyaw = trace.yaw[lag:] - trace.yaw[:-lag]
    dyaw = np.abs((dyaw + 180.0) % 360.0 - 180.0)
    dpitch = np.abs(trace.pitch[lag:] - trace.pitch[:-lag])
    err = np.maximum(dyaw, dpitch)
    dt = trace.t_ms[lag:] - trace.t_ms[:-lag]
    speed = err * 1000.0 / dt
    out[lag:] = (speed > threshold_dps).astype(np.int8)
    return out


# -- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: Direction
    dwell_mean_s: float
    name: str = ""
    jitter_std_deg: float | None = None


@dataclass(frozen=True)
class SyntheticSceneSpec:
    objects: tuple[SceneObject, ...]
    transitions: tuple[tuple[float, ...], ...]
    saccade_speed_dps: float = 250.0
    jitter_std_deg: float = 1.0
    seed: int = 0
    jitter_tau_s: float = 0.5

    def __post_init__(self):
        objs = tuple(self.objects)
        if not objs:
            raise InvalidInput("scene needs at least one object")
        ids = [o.class_id for o in objs]
        if len(set(ids)) != len(ids) or any(not 0 <= c < MAX_CLASSES for c in ids):
            raise InvalidInput("object class ids must be unique and in [0, 32)")
        if any(o.dwell_mean_s <= 0 for o in objs):
            raise InvalidInput("dwell means must be positive")
        p = np.asarray(self.transitions, dtype=float)
        if p.shape != (len(objs), len(objs)):
            raise InvalidInput(f"transition matrix must be {len(objs)}x{len(objs)}")
        if (p < 0).any() or (np.diag(p) != 0).any():
            raise InvalidInput("transition probabilities must be >= 0 with a zero diagonal")
        sums = p.sum(axis=1)
        if not all(abs(s - 1.0) <= 1e-9 or s == 0.0 for s in sums):
            raise InvalidInput("each transition row must sum to 1 (or be all zero)")
        if self.saccade_speed_dps <= STORM_THRESHOLD_DPS:
            raise InvalidInput(f"saccade speed must exceed {STORM_THRESHOLD_DPS} deg/s")
        if self.jitter_std_deg < 0 or self.jitter_tau_s <= 0:
            raise InvalidInput("jitter std must be >= 0 and tau > 0")
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "transitions", tuple(tuple(float(x) for x in r) for r in p))

    def jitter_of(self, i: int) -> float:
        j = self.objects[i].jitter_std_deg
        return self.jitter_std_deg if j is None else j

    def graph(self) -> AssociationGraph:
        rows = {}
        for i, o in enumerate(self.objects):
            rows[o.class_id] = [(self.objects[j].class_id, p) for j, p in enumerate(self.transitions[i]) if p > 0]
        return AssociationGraph(rows)

    def to_dict(self) -> dict:
        return {
            "objects": [
                {"class_id": o.class_id, "name": o.name, "yaw": o.center.yaw, "pitch": o.center.pitch,
                 "dwell_mean_s": o.dwell_mean_s,
                 **({"jitter_std_deg": o.jitter_std_deg} if o.jitter_std_deg is not None else {})}
                for o in self.objects
            ],
            "transitions": [list(r) for r in self.transitions],
            "saccade_speed_dps": self.saccade_speed_dps,
            "jitter_std_deg": self.jitter_std_deg,
            "jitter_tau_s": self.jitter_tau_s,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        try:
            objs = tuple(
                SceneObject(int(o["class_id"]), Direction(o["yaw"], o["pitch"]), float(o["dwell_mean_s"]),
                            str(o.get("name", "")),
                            None if o.get("jitter_std_deg") is None else float(o["jitter_std_deg"]))
                for o in d["objects"]
            )
            return cls(objs, tuple(tuple(r) for r in d["transitions"]),
                       float(d.get("saccade_speed_dps", 250.0)), float(d.get("jitter_std_deg", 1.0)),
                       int(d.get("seed", 0)), float(d.get("jitter_tau_s", 0.5)))
        except (KeyError, TypeError) as exc:
            raise InvalidInput(f"malformed scene spec: {exc!r}") from None

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSceneSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Saccade:
    t_start_ms: float
    t_end_ms: float
    src: int
    dst: int


@dataclass
class SyntheticSession:
    trace: HeadTrace
    metas: list[SemanticChunkMeta]
    saccades: list[Saccade]
    scene: SyntheticSceneSpec
    in_saccade: np.ndarray = field(repr=False, default=None)


def object_tile_masks(scene: SyntheticSceneSpec, grid: TileGrid) -> tuple[int, ...]:
    """Per-tile class bitmask: a class marks every tile within 10 degrees of its object center."""
    masks = [0] * grid.n_tiles
    for o in scene.objects:
        box = viewport_tiles(Viewport(o.center, 2 * OBJECT_RADIUS_DEG, 2 * OBJECT_RADIUS_DEG), grid)
        for t in box:
            masks[t] |= 1 << o.class_id
    return tuple(masks)


def generate_synthetic(scene: SyntheticSceneSpec, duration_s: float, rate_hz: float = DEFAULT_RATE_HZ,
                       grid: TileGrid | None = None, chunk_ms: float = 1000.0,
                       session_id: str | None = None) -> SyntheticSession:
    """Simulate fixation/saccade head motion over a static object scene.

    Fixations jitter around the object center with an Ornstein-Uhlenbeck
    offset; dwell times are exponential. Saccades move at constant Chebyshev
    speed along the shortest yaw path to the next object, drawn from the
    scene's transition matrix. Output is deterministic given ``scene.seed``.
    """
    grid = grid or TileGrid()
    n = int(round(duration_s * rate_hz))
    if n < 1:
        raise InvalidInput("duration too short for one sample")
    dt = 1.0 / rate_hz
    noise_ss, dwell_ss, choice_ss = np.random.SeedSequence(scene.seed).spawn(3)
    noise = np.random.default_rng(noise_ss).standard_normal((n, 2))
    dwell_rng = np.random.default_rng(dwell_ss)
    choice_rng = np.random.default_rng(choice_ss)
    rho = math.exp(-dt / scene.jitter_tau_s)
    innov = math.sqrt(1.0 - rho * rho)
    trans = np.asarray(scene.transitions)

    yaw = np.empty(n)
    pitch = np.empty(n)
    cls = np.full(n, -1, dtype=int)
    in_sacc = np.zeros(n, dtype=bool)
    saccades = []

    cur = 0
    obj = scene.objects[cur]
    sigma = scene.jitter_of(cur)
    oy = op = 0.0
    fix_end = dwell_rng.exponential(obj.dwell_mean_s)
    sacc = None  # (t0, dur, y0, p0, dy, dp, dst index)
    for i in range(n):
        t = i * dt
        moving = False
        while True:
            if sacc is None:
                if t < fix_end or trans[cur].sum() == 0:
                    break
                nxt = int(choice_rng.choice(len(scene.objects), p=trans[cur]))
                y0 = obj.center.yaw + oy
                p0 = max(-90.0, min(90.0, obj.center.pitch + op))
                tgt = scene.objects[nxt].center
                dy = wrap_yaw(tgt.yaw - y0)
                dp = tgt.pitch - p0
                sacc = (fix_end, max(abs(dy), abs(dp)) / scene.saccade_speed_dps, y0, p0, dy, dp, nxt)
            t0, dur, y0, p0, dy, dp, nxt = sacc
            if t < t0 + dur:
                f = (t - t0) / dur
                yaw[i] = y0 + f * dy
                pitch[i] = p0 + f * dp
                moving = True
                break
            saccades.append(Saccade(float(t0) * 1000.0, float(t0 + dur) * 1000.0,
                                    obj.class_id, scene.objects[nxt].class_id))
            cur, obj = nxt, scene.objects[nxt]
            sigma = scene.jitter_of(cur)
            oy = op = 0.0
            fix_end = t0 + dur + dwell_rng.exponential(obj.dwell_mean_s)
            sacc = None
        if moving:
            in_sacc[i] = True
            continue
        oy = rho * oy + sigma * innov * noise[i, 0]
        op = rho * op + sigma * innov * noise[i, 1]
        yaw[i] = obj.center.yaw + oy
        pitch[i] = obj.center.pitch + op
        cls[i] = obj.class_id

    t_ms = np.arange(n) * (1000.0 / rate_hz)
    trace = HeadTrace(session_id or f"synthetic-{scene.seed}", rate_hz, t_ms, yaw, pitch, cls)
    masks = object_tile_masks(scene, grid)
    present = {o.class_id for o in scene.objects}
    edges = scene.graph().top_edges(present)
    n_chunks = int(math.ceil(n * (1000.0 / rate_hz) / chunk_ms))
    metas = [SemanticChunkMeta(c, masks, edges, grid) for c in range(n_chunks)]
    return SyntheticSession(trace, metas, saccades, scene, in_sacc)


def synthetic_saliency(session: SyntheticSession, seed: int, distractors: int = 6,
                       grid: TileGrid | None = None) -> dict[int, dict[int, float]]:
    """Per-chunk tile saliency: object tiles score high, plus random bright distractors.

    Returns ``{chunk: {tile_id: score}}`` in the saliency CSV's shape.
    """
    grid = grid or session.metas[0].grid
    rng = np.random.default_rng(seed)
    out = {}
    for meta in session.metas:
        scores = rng.uniform(0.0, 0.3, grid.n_tiles)
        for t, m in enumerate(meta.tile_masks):
            if m:
                scores[t] += 0.5 + 0.2 * rng.uniform()
        for t in rng.choice(grid.n_tiles, size=min(distractors, grid.n_tiles), replace=False):
            scores[t] += rng.uniform(0.4, 1.0)
        out[meta.chunk_index] = {t: float(s) for t, s in enumerate(scores)}
    return out


def format_saliency(sal: dict[int, dict[int, float]]) -> str:
    out = ["chunk,tile_id,score"]
    for c in sorted(sal):
        for t in sorted(sal[c]):
            out.append(f"{c},{t},{sal[c][t]!r}")
    return "\n".join(out) + "\n"


def parse_saliency(text: str) -> dict[int, dict[int, float]]:
    lines = text.splitlines()
    if not lines or [h.strip() for h in lines[0].split(",")] != ["chunk", "tile_id", "score"]:
        raise ParseError("expected header chunk,tile_id,score", 1)
    out: dict[int, dict[int, float]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            c, t, s = line.split(",")
            out.setdefault(int(c), {})[int(t)] = float(s)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return out
