"""Normalised split-conformal calibration with regime bins and online risk adaptation."""

from __future__ import annotations

import json
import math
from bisect import bisect_left, insort
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable

from .sphere import Direction, InvalidInput, angular_error

DEFAULT_CAPACITY = 2000
DEFAULT_ALPHA = 0.05
DEFAULT_GAMMA = 0.005
MIN_CLASS_SAMPLES = 20


@dataclass(frozen=True)
class DifficultyTable:
    """Per-class error scale in degrees, with a global fallback and a floor."""

    per_class: dict = field(default_factory=dict)
    global_sigma: float = 1.0
    floor: float = 1.0

    def __post_init__(self):
        if not self.floor > 0:
            raise InvalidInput(f"difficulty floor must be > 0, got {self.floor}")
        object.__setattr__(self, "per_class", {int(k): max(float(v), self.floor)
                                               for k, v in self.per_class.items()})
        object.__setattr__(self, "global_sigma", max(float(self.global_sigma), self.floor))

    def to_dict(self) -> dict:
        return {"per_class": {str(k): v for k, v in sorted(self.per_class.items())},
                "global_sigma": self.global_sigma, "floor": self.floor}

    @classmethod
    def from_dict(cls, d: dict) -> "DifficultyTable":
        return cls({int(k): v for k, v in d["per_class"].items()}, d["global_sigma"], d["floor"])


def difficulty(table: DifficultyTable, cls: int | None) -> float:
    if cls is not None and cls in table.per_class:
        return table.per_class[cls]
    return table.global_sigma


def fit_difficulty(samples: Iterable[tuple[int | None, float]], sigma_min: float = 1.0,
                   min_count: int = MIN_CLASS_SAMPLES) -> DifficultyTable:
    """Mean absolute error per class; classes with fewer than ``min_count`` samples use the global mean."""
    sums: dict = {}
    counts: dict = {}
    total = 0.0
    n = 0
    for cls, err in samples:
        err = abs(float(err))
        total += err
        n += 1
        if cls is not None:
            sums[cls] = sums.get(cls, 0.0) + err
            counts[cls] = counts.get(cls, 0) + 1
    if n == 0:
        raise InvalidInput("fit_difficulty needs at least one sample")
    per_class = {c: sums[c] / counts[c] for c in sums if counts[c] >= min_count}
    return DifficultyTable(per_class, total / n, sigma_min)


def score(true_dir: Direction, pred: Direction, sigma: float) -> float:
    """Angular error in units of the difficulty scale."""
    if not sigma > 0:
        raise InvalidInput(f"difficulty must be > 0, got {sigma}")
    return angular_error(true_dir, pred) / sigma


class CalibrationStore:
    """Bounded, insertion-ordered score windows keyed by regime (or any bin label).

    Each bin keeps a FIFO for eviction and a sorted copy so quantiles are O(1).
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise InvalidInput(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._fifo: dict = {}
        self._sorted: dict = {}

    def observe(self, bin_: Hashable, value: float) -> None:
        if not (math.isfinite(value) and value >= 0):
            raise InvalidInput(f"scores must be finite and >= 0, got {value}")
        fifo = self._fifo.setdefault(bin_, deque())
        srt = self._sorted.setdefault(bin_, [])
        fifo.append(value)
        insort(srt, value)
        if len(fifo) > self.capacity:
            old = fifo.popleft()
            del srt[bisect_left(srt, old)]

    def size(self, bin_: Hashable) -> int:
        return len(self._fifo.get(bin_, ()))

    def scores(self, bin_: Hashable) -> list[float]:
        return list(self._fifo.get(bin_, ()))

    def sorted_scores(self, bin_: Hashable) -> list[float]:
        return self._sorted.get(bin_, [])

    def bins(self) -> list:
        return list(self._fifo)

    def clear(self) -> None:
        self._fifo.clear()
        self._sorted.clear()

    def to_dict(self) -> dict:
        return {"capacity": self.capacity,
                "bins": {str(b): list(self._fifo[b]) for b in self._fifo}}

    @classmethod
    def from_dict(cls, d: dict, key=str) -> "CalibrationStore":
        store = cls(int(d["capacity"]))
        for b, values in d["bins"].items():
            for v in values:
                store.observe(key(b), float(v))
        return store


def observe(store: CalibrationStore, regime: Hashable, value: float) -> CalibrationStore:
    store.observe(regime, value)
    return store


def quantile_index(n: int, alpha: float) -> int:
    """1-based rank ceil((n + 1)(1 - alpha)); guards against float round-up."""
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9)


def conformal_quantile(store: CalibrationStore, regime: Hashable, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score in the bin, or inf if that rank exceeds n."""
    if not 0.0 < alpha < 1.0:
        raise InvalidInput(f"alpha must be in (0, 1), got {alpha}")
    srt = store.sorted_scores(regime)
    k = quantile_index(len(srt), alpha)
    if k > len(srt):
        return math.inf
    return srt[max(k, 1) - 1]


def margin(q: float, sigma: float) -> float:
    if q == 0:
        return 0.0
    return q * sigma


@dataclass(frozen=True)
class AciState:
    alpha: float = DEFAULT_ALPHA
    alpha_target: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    alpha_min: float = 0.005
    alpha_max: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha_min < self.alpha_max < 1.0:
            raise InvalidInput("need 0 < alpha_min < alpha_max < 1")
        if not self.gamma >= 0:
            raise InvalidInput("gamma must be >= 0")
        object.__setattr__(self, "alpha", min(self.alpha_max, max(self.alpha_min, self.alpha)))


def aci_update(state: AciState, covered: bool) -> AciState:
    """alpha <- clamp(alpha + gamma * (target - miss)); a miss lowers alpha and widens sets."""
    err = 0.0 if covered else 1.0
    a = state.alpha + state.gamma * (state.alpha_target - err)
    return replace(state, alpha=min(state.alpha_max, max(state.alpha_min, a)))


def snapshot_json(store: CalibrationStore, table: DifficultyTable | None = None) -> str:
    doc = {"store": store.to_dict()}
    if table is not None:
        doc["difficulty"] = table.to_dict()
    return json.dumps(doc, sort_keys=True)


def load_snapshot(text: str, key=str) -> tuple[CalibrationStore, DifficultyTable | None]:
    doc = json.loads(text)
    table = DifficultyTable.from_dict(doc["difficulty"]) if "difficulty" in doc else None
    return CalibrationStore.from_dict(doc["store"], key), table
