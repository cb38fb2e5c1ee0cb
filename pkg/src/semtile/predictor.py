"""Point forecasts of the viewport center from a sliding window of head samples."""

from __future__ import annotations

import importlib
from dataclasses import dataclass
from typing import Protocol, Sequence

from .sphere import Direction
from .traces import GazeSample

DEFAULT_WINDOW = 8


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class ForecastRequest:
    window: Sequence[GazeSample]
    horizon_k: float

    def __post_init__(self):
        if len(self.window) < 2:
            raise InsufficientHistory(f"forecast window needs >= 2 samples, got {len(self.window)}")
        ts = [s.t for s in self.window]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("forecast window timestamps must be strictly increasing")


@dataclass(frozen=True)
class ForecastResult:
    predicted: Direction
    forecaster: str


class Forecaster(Protocol):
    name: str

    def predict(self, req: ForecastRequest) -> ForecastResult: ...


def unwrap_yaw_series(yaws: Sequence[float]) -> list[float]:
    """Shift each yaw by a multiple of 360 so consecutive steps stay within +-180."""
    if not yaws:
        raise ValueError("empty yaw series")
    out = [float(yaws[0])]
    for y in yaws[1:]:
        d = (y - out[-1] + 180.0) % 360.0 - 180.0
        out.append(out[-1] + d)
    return out


def _ols_at(ts: Sequence[float], ys: Sequence[float], t_eval: float) -> float:
    n = len(ts)
    t0 = ts[-1]
    mt = sum(t - t0 for t in ts) / n
    my = sum(ys) / n
    sxx = sxy = 0.0
    for t, y in zip(ts, ys):
        dt = t - t0 - mt
        sxx += dt * dt
        sxy += dt * (y - my)
    slope = sxy / sxx if sxx > 0 else 0.0
    return my + slope * (t_eval - t0 - mt)


class LinearTrendForecaster:
    """Least-squares line through unwrapped yaw and pitch, evaluated at the horizon."""

    name = "linear"

    def predict(self, req: ForecastRequest) -> ForecastResult:
        win = req.window
        ts = [s.t for s in win]
        yaws = unwrap_yaw_series([s.dir.yaw for s in win])
        t_eval = ts[-1] + req.horizon_k
        yaw = _ols_at(ts, yaws, t_eval)
        pitch = _ols_at(ts, [s.dir.pitch for s in win], t_eval)
        return ForecastResult(Direction(yaw, pitch), self.name)


class LastSampleForecaster:
    """Zero-order hold: the most recent orientation."""

    name = "last"

    def predict(self, req: ForecastRequest) -> ForecastResult:
        return ForecastResult(req.window[-1].dir, self.name)


_REGISTRY = {
    "linear": LinearTrendForecaster,
    "last": LastSampleForecaster,
}


def load_forecaster(spec: str = "linear") -> Forecaster:
    """Instantiate a built-in forecaster by name or a plug-in given as ``module:Class``."""
    if spec in _REGISTRY:
        return _REGISTRY[spec]()
    if ":" not in spec:
        raise ValueError(f"unknown forecaster {spec!r}; use one of {sorted(_REGISTRY)} or module:Class")
    mod, _, attr = spec.partition(":")
    obj = getattr(importlib.import_module(mod), attr)
    inst = obj() if isinstance(obj, type) else obj
    if not callable(getattr(inst, "predict", None)):
        raise TypeError(f"{spec} has no predict(request) method")
    return inst


_default = LinearTrendForecaster()


def predict_point(req: ForecastRequest, forecaster: Forecaster | None = None) -> ForecastResult:
    return (forecaster or _default).predict(req)
